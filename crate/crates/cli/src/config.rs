//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Relative paths resolve against
//! the directory holding the config file; paths given as command-line
//! overrides resolve against the working directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use softmoa::adapters::Activation;
use softmoa::data::{generate, Dataset, SyntheticTaskSpec};
use softmoa::encoder::{EncoderConfig, Petl, Placement};
use softmoa::training::TrainConfig;

/// A configuration problem; the offending key when there is one.
#[derive(Debug)]
pub struct ConfigError {
    pub key: Option<String>,
    pub msg: String,
}

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError { key: None, msg: msg.into() }
    }

    pub fn at(key: &str, msg: impl Into<String>) -> Self {
        ConfigError {
            key: Some(key.to_string()),
            msg: msg.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "config key `{k}`: {}", self.msg),
            None => write!(f, "config: {}", self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

const KEYS: &[&str] = &[
    "seed",
    "out",
    "petl",
    "backbone",
    "model.preset",
    "model.d_model",
    "model.layers",
    "model.heads",
    "model.freq_bins",
    "model.frames",
    "model.patch_freq",
    "model.patch_time",
    "model.ffn_mult",
    "model.placement",
    "model.activation",
    "train.epochs",
    "train.batch_size",
    "train.lr_max",
    "train.lr_min",
    "train.weight_decay",
    "train.eval_every",
    "train.max_steps",
    "train.backbone",
    "data.train",
    "data.test",
    "data.classes",
    "data.samples_per_class",
    "data.test_samples_per_class",
    "data.noise",
    "data.time_jitter",
    "data.pattern_seed",
    "data.seed",
    "data.test_seed",
    "bench.variants",
    "bench.steps",
    "bench.warmup",
    "sweep.mode",
    "sweep.grid",
    "sweep.budget",
    "analyze.layers",
    "analyze.checkpoint",
    "gradcheck.batch",
    "gradcheck.init_std",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    Budget,
    Adapters,
    Slots,
}

impl std::str::FromStr for SweepMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "budget" => Ok(SweepMode::Budget),
            "adapters" => Ok(SweepMode::Adapters),
            "slots" => Ok(SweepMode::Slots),
            other => Err(format!("unknown sweep mode `{other}` (budget, adapters, slots)")),
        }
    }
}

impl fmt::Display for SweepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepMode::Budget => "budget",
            SweepMode::Adapters => "adapters",
            SweepMode::Slots => "slots",
        })
    }
}

/// Which encoder layers an analysis covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSelector {
    All,
    Only(Vec<usize>),
}

impl LayerSelector {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "all" {
            return Ok(LayerSelector::All);
        }
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
            match part.split_once('-') {
                Some((a, b)) => {
                    let (a, b) = (num(a)?, num(b)?);
                    if a > b {
                        return Err(format!("empty range `{part}`"));
                    }
                    out.extend(a..=b);
                }
                None => out.push(num(part)?),
            }
        }
        if out.is_empty() {
            return Err("no layers selected".into());
        }
        out.sort_unstable();
        out.dedup();
        Ok(LayerSelector::Only(out))
    }

    pub fn resolve(&self, n_layers: usize) -> std::result::Result<Vec<usize>, String> {
        match self {
            LayerSelector::All => Ok((0..n_layers).collect()),
            LayerSelector::Only(v) => match v.iter().find(|&&l| l >= n_layers) {
                Some(l) => Err(format!("layer {l} out of range for {n_layers} layers")),
                None => Ok(v.clone()),
            },
        }
    }
}

/// Where datasets come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Paired train/test files, one task per train file.
    Files { train: Vec<PathBuf>, test: Vec<PathBuf> },
    /// Generated tasks, one per pattern seed.
    Synthetic {
        template: SyntheticTaskSpec,
        pattern_seeds: Vec<u64>,
        test_samples_per_class: usize,
        test_seed: u64,
    },
}

/// One classification task resolved from the data section.
#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    pub train: Dataset,
    pub test: Option<Dataset>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Variants to time; empty means the run's own `petl`.
    pub variants: Vec<Petl>,
    pub steps: usize,
    pub warmup: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub grid: Vec<String>,
    pub budget: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `n_classes` is filled in from the data when a model is built.
    pub model: EncoderConfig,
    pub seed: u64,
    pub train: TrainConfig,
    /// Unfreeze the backbone (source-task pretraining).
    pub train_backbone: bool,
    /// Checkpoint whose backbone weights replace the initialization.
    pub backbone: Option<PathBuf>,
    pub data: DataSource,
    pub out: PathBuf,
    pub bench: BenchConfig,
    pub sweep: SweepConfig,
    pub layers: LayerSelector,
    pub checkpoint: Option<PathBuf>,
    pub gradcheck_batch: usize,
    pub gradcheck_init_std: f64,
    /// SHA-256 of the config text plus overrides, hex.
    pub hash: String,
}

/// Command-line values that replace config keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub warmup: Option<usize>,
    pub layers: Option<String>,
    pub mode: Option<String>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let abs = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.clone())
            }
        };
        let mut v = Vec::new();
        if let Some(p) = &self.out {
            v.push(("out", abs(p).display().to_string()));
        }
        if let Some(s) = self.seed {
            v.push(("seed", s.to_string()));
        }
        if let Some(s) = self.steps {
            v.push(("bench.steps", s.to_string()));
        }
        if let Some(s) = self.warmup {
            v.push(("bench.warmup", s.to_string()));
        }
        if let Some(s) = &self.layers {
            v.push(("analyze.layers", s.clone()));
        }
        if let Some(s) = &self.mode {
            v.push(("sweep.mode", s.clone()));
        }
        if let Some(p) = &self.data {
            v.push(("data.train", abs(p).display().to_string()));
            v.push(("data.test", String::new()));
        }
        if let Some(p) = &self.checkpoint {
            v.push(("analyze.checkpoint", abs(p).display().to_string()));
        }
        v
    }
}

fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::new(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(ConfigError::at(k, "unknown key"));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(ConfigError::at(k, format!("line {}: duplicate key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigError::at(key, format!("`{v}`: {e}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::at(key, format!("`{v}` is not a boolean"))),
    }
}

impl RunConfig {
    /// Defaults only, as if read from an empty file in `base`.
    pub fn defaults(base: &Path) -> Result<Self> {
        Self::from_text("", base, &Overrides::default())
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::new(format!("cannot read {}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Self::from_text(&text, &base, overrides)
            }
            None => {
                let base = std::env::current_dir().unwrap_or_default();
                Self::from_text("", &base, overrides)
            }
        }
    }

    pub fn from_text(text: &str, base: &Path, overrides: &Overrides) -> Result<Self> {
        let mut pairs = parse_lines(text)?;
        let extra = overrides.pairs();
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        for (k, v) in &extra {
            hasher.update(format!("\n{k}={v}").as_bytes());
            pairs.retain(|(seen, _)| seen != k);
            pairs.push((k.to_string(), v.clone()));
        }
        let hash = hex::encode(hasher.finalize());
        let map: BTreeMap<String, String> = pairs.into_iter().collect();
        Self::build(&map, base, hash)
    }

    fn build(map: &BTreeMap<String, String>, base: &Path, hash: String) -> Result<Self> {
        let get = |k: &str| map.get(k).map(String::as_str);
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let mut model = match get("model.preset") {
            None | Some("desk") => EncoderConfig::default(),
            Some("paper") => EncoderConfig::paper_shape(Petl::None, 10),
            Some(other) => return Err(ConfigError::at("model.preset", format!("`{other}` (desk, paper)"))),
        };
        for (key, field) in [
            ("model.d_model", &mut model.d_model),
            ("model.layers", &mut model.n_layers),
            ("model.heads", &mut model.n_heads),
            ("model.freq_bins", &mut model.freq_bins),
            ("model.frames", &mut model.frames),
            ("model.patch_freq", &mut model.patch_freq),
            ("model.patch_time", &mut model.patch_time),
            ("model.ffn_mult", &mut model.ffn_mult),
        ] {
            if let Some(v) = get(key) {
                *field = num(key, v)?;
            }
        }
        if let Some(v) = get("model.placement") {
            model.placement = v.parse::<Placement>().map_err(|e| ConfigError::at("model.placement", e.to_string()))?;
        }
        if let Some(v) = get("model.activation") {
            model.activation = v.parse::<Activation>().map_err(|e| ConfigError::at("model.activation", e.to_string()))?;
        }
        if let Some(v) = get("petl") {
            model.petl = v.parse::<Petl>().map_err(|e| ConfigError::at("petl", e.to_string()))?;
        }
        model.validate().map_err(|e| ConfigError::at("model", e.to_string()))?;

        let seed = get("seed").map(|v| num("seed", v)).transpose()?.unwrap_or(0);
        let mut train = TrainConfig { seed, ..Default::default() };
        if let Some(v) = get("train.epochs") {
            train.epochs = num("train.epochs", v)?;
        }
        if let Some(v) = get("train.batch_size") {
            train.batch_size = num("train.batch_size", v)?;
        }
        if let Some(v) = get("train.lr_max") {
            train.lr_max = num("train.lr_max", v)?;
        }
        if let Some(v) = get("train.lr_min") {
            train.lr_min = num("train.lr_min", v)?;
        }
        if let Some(v) = get("train.weight_decay") {
            train.weight_decay = num("train.weight_decay", v)?;
        }
        if let Some(v) = get("train.eval_every") {
            train.eval_every = num("train.eval_every", v)?;
        }
        if let Some(v) = get("train.max_steps") {
            train.max_steps = Some(num("train.max_steps", v)?);
        }
        train.validate().map_err(|e| ConfigError::at("train", e.to_string()))?;
        let train_backbone = get("train.backbone").map(|v| boolean("train.backbone", v)).transpose()?.unwrap_or(false);

        let data = match get("data.train").filter(|v| !v.is_empty()) {
            Some(v) => {
                let train: Vec<PathBuf> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(path).collect();
                let test: Vec<PathBuf> = get("data.test")
                    .unwrap_or("")
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(path)
                    .collect();
                if !test.is_empty() && test.len() != train.len() {
                    return Err(ConfigError::at(
                        "data.test",
                        format!("{} test files for {} training files", test.len(), train.len()),
                    ));
                }
                DataSource::Files { train, test }
            }
            None => {
                if get("data.test").is_some_and(|v| !v.is_empty()) {
                    return Err(ConfigError::at("data.test", "test files need data.train files"));
                }
                let classes = get("data.classes").map(|v| num("data.classes", v)).transpose()?.unwrap_or(10);
                let mut template = SyntheticTaskSpec::random(classes, model.freq_bins, model.frames, 0);
                if let Some(v) = get("data.samples_per_class") {
                    template = template.with_samples_per_class(num("data.samples_per_class", v)?);
                }
                if let Some(v) = get("data.noise") {
                    template = template.with_noise(num("data.noise", v)?);
                }
                if let Some(v) = get("data.time_jitter") {
                    template = template.with_time_jitter(num("data.time_jitter", v)?);
                }
                if let Some(v) = get("data.seed") {
                    template = template.with_seed(num("data.seed", v)?);
                }
                let pattern_seeds = match get("data.pattern_seed") {
                    Some(v) => list("data.pattern_seed", v)?,
                    None => vec![1],
                };
                if pattern_seeds.is_empty() {
                    return Err(ConfigError::at("data.pattern_seed", "no seeds given"));
                }
                template.validate().map_err(|e| ConfigError::at("data", e.to_string()))?;
                DataSource::Synthetic {
                    template,
                    pattern_seeds,
                    test_samples_per_class: get("data.test_samples_per_class")
                        .map(|v| num("data.test_samples_per_class", v))
                        .transpose()?
                        .unwrap_or(50),
                    test_seed: get("data.test_seed").map(|v| num("data.test_seed", v)).transpose()?.unwrap_or(1),
                }
            }
        };

        let bench = BenchConfig {
            variants: match get("bench.variants") {
                Some(v) => v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<Petl>().map_err(|e| ConfigError::at("bench.variants", e.to_string())))
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            },
            steps: get("bench.steps").map(|v| num("bench.steps", v)).transpose()?.unwrap_or(50),
            warmup: get("bench.warmup").map(|v| num("bench.warmup", v)).transpose()?.unwrap_or(5),
        };
        if bench.steps < 20 {
            return Err(ConfigError::at("bench.steps", format!("{} timed steps, need at least 20", bench.steps)));
        }
        if bench.warmup < 5 {
            return Err(ConfigError::at("bench.warmup", format!("{} warmup steps, need at least 5", bench.warmup)));
        }

        let sweep = SweepConfig {
            mode: get("sweep.mode")
                .map(|v| v.parse().map_err(|e: String| ConfigError::at("sweep.mode", e)))
                .transpose()?
                .unwrap_or(SweepMode::Budget),
            grid: get("sweep.grid")
                .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
                .unwrap_or_default(),
            budget: get("sweep.budget").map(|v| num("sweep.budget", v)).transpose()?,
        };

        let layers = LayerSelector::parse(get("analyze.layers").unwrap_or("all"))
            .map_err(|e| ConfigError::at("analyze.layers", e))?;
        let gradcheck_batch = get("gradcheck.batch").map(|v| num("gradcheck.batch", v)).transpose()?.unwrap_or(2);
        if gradcheck_batch == 0 {
            return Err(ConfigError::at("gradcheck.batch", "must be at least 1"));
        }
        let gradcheck_init_std = get("gradcheck.init_std")
            .map(|v| num("gradcheck.init_std", v))
            .transpose()?
            .unwrap_or(0.1);

        Ok(RunConfig {
            model,
            seed,
            train,
            train_backbone,
            backbone: get("backbone").filter(|v| !v.is_empty()).map(path),
            data,
            out: path(get("out").unwrap_or("out")),
            bench,
            sweep,
            layers,
            checkpoint: get("analyze.checkpoint").filter(|v| !v.is_empty()).map(path),
            gradcheck_batch,
            gradcheck_init_std,
            hash,
        })
    }

    /// Number of classes the data declares, without generating it.
    pub fn n_classes(&self) -> std::result::Result<usize, softmoa::Error> {
        match &self.data {
            DataSource::Synthetic { template, .. } => Ok(template.n_classes),
            DataSource::Files { train, .. } => Ok(Dataset::load(&train[0])?.n_classes),
        }
    }

    /// Loads or generates every task.
    pub fn tasks(&self) -> std::result::Result<Vec<Task>, softmoa::Error> {
        let tasks = match &self.data {
            DataSource::Files { train, test } => train
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let name = p.file_stem().map_or_else(|| format!("task{i}"), |s| s.to_string_lossy().into_owned());
                    Ok(Task {
                        name,
                        train: Dataset::load(p)?,
                        test: test.get(i).map(Dataset::load).transpose()?,
                    })
                })
                .collect::<std::result::Result<Vec<_>, softmoa::Error>>()?,
            DataSource::Synthetic {
                template,
                pattern_seeds,
                test_samples_per_class,
                test_seed,
            } => pattern_seeds
                .iter()
                .map(|&ps| {
                    let spec = SyntheticTaskSpec::random(template.n_classes, template.freq_bins, template.frames, ps)
                        .with_samples_per_class(template.samples_per_class)
                        .with_noise(template.noise)
                        .with_time_jitter(template.time_jitter)
                        .with_seed(template.seed);
                    let test = (*test_samples_per_class > 0)
                        .then(|| {
                            generate(
                                &spec
                                    .clone()
                                    .with_samples_per_class(*test_samples_per_class)
                                    .with_seed(*test_seed),
                            )
                        })
                        .transpose()?;
                    Ok(Task {
                        name: format!("synthetic-{ps}"),
                        train: generate(&spec)?,
                        test,
                    })
                })
                .collect::<std::result::Result<Vec<_>, softmoa::Error>>()?,
        };
        for t in &tasks {
            for d in std::iter::once(&t.train).chain(&t.test) {
                if (d.freq_bins, d.frames) != (self.model.freq_bins, self.model.frames) {
                    return Err(softmoa::Error::Validation(format!(
                        "task {} has {}x{} spectrograms, model expects {}x{}",
                        t.name, d.freq_bins, d.frames, self.model.freq_bins, self.model.frames
                    )));
                }
            }
        }
        Ok(tasks)
    }

    /// The encoder config for `petl` with a head of `n_classes`.
    pub fn encoder(&self, petl: Petl, n_classes: usize) -> EncoderConfig {
        EncoderConfig {
            petl,
            n_classes,
            ..self.model.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_text(text, Path::new("/base"), &Overrides::default())
    }

    #[test]
    fn defaults_are_desk_scale() {
        let c = parse("").unwrap();
        assert_eq!(c.model, EncoderConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.out, PathBuf::from("/base/out"));
        assert_eq!((c.bench.steps, c.bench.warmup), (50, 5));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse("seed = 1\nmodel.depth = 3\n").unwrap_err();
        assert_eq!(err.key.as_deref(), Some("model.depth"));
        assert!(err.to_string().contains("model.depth"));
    }

    #[test]
    fn bad_values_name_their_key() {
        for (text, key) in [
            ("petl = soft:14:1", "petl"),
            ("train.lr_max = fast", "train.lr_max"),
            ("bench.steps = 0", "bench.steps"),
            ("bench.warmup = 2", "bench.warmup"),
            ("sweep.mode = grid", "sweep.mode"),
            ("seed = 1\nseed = 2", "seed"),
        ] {
            assert_eq!(parse(text).unwrap_err().key.as_deref(), Some(key), "{text}");
        }
        assert!(parse("just words").unwrap_err().key.is_none());
    }

    #[test]
    fn comments_and_paths() {
        let c = parse("# header\npetl = soft:14:1:1 # trailing\n\ndata.train = a.smds, /abs/b.smds\nout = runs\n").unwrap();
        assert_eq!(c.model.petl, Petl::SoftMoa { experts: 14, slots: 1, bottleneck: 1 });
        assert_eq!(
            c.data,
            DataSource::Files {
                train: vec![PathBuf::from("/base/a.smds"), PathBuf::from("/abs/b.smds")],
                test: vec![]
            }
        );
        assert_eq!(c.out, PathBuf::from("/base/runs"));
    }

    #[test]
    fn hash_covers_text_and_overrides() {
        let a = parse("seed = 1").unwrap().hash;
        assert_eq!(a, parse("seed = 1").unwrap().hash);
        assert_ne!(a, parse("seed = 2").unwrap().hash);
        let o = Overrides { seed: Some(9), ..Default::default() };
        let c = RunConfig::from_text("seed = 1", Path::new("/"), &o).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.seed, 9);
        assert_ne!(c.hash, a);
    }

    #[test]
    fn paper_preset_then_override() {
        let c = parse("model.preset = paper\nmodel.layers = 2").unwrap();
        assert_eq!((c.model.d_model, c.model.n_layers, c.model.n_tokens()), (768, 2, 512));
    }

    #[test]
    fn layer_selector() {
        assert_eq!(LayerSelector::parse("all").unwrap().resolve(3).unwrap(), vec![0, 1, 2]);
        assert_eq!(LayerSelector::parse("3, 0-1").unwrap().resolve(4).unwrap(), vec![0, 1, 3]);
        assert!(LayerSelector::parse("2-1").is_err());
        assert!(LayerSelector::parse("5").unwrap().resolve(4).is_err());
    }

    #[test]
    fn synthetic_tasks_follow_model_shape() {
        let c = parse("model.freq_bins = 8\nmodel.frames = 16\ndata.classes = 2\ndata.samples_per_class = 3\ndata.pattern_seed = 4, 5").unwrap();
        let tasks = c.tasks().unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].train.len(), 6);
        assert_eq!(tasks[1].test.as_ref().unwrap().len(), 100);
        assert_ne!(tasks[0].train, tasks[1].train);
    }
}
