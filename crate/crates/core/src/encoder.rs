//! Patch-embedding transformer encoder with parallel PETL blocks.
//!
//! Layers are pre-norm. A PETL block reads the same normalized input as the
//! sub-layer it sits beside and its output is added into the residual stream
//! next to the sub-layer output:
//!
//! ```text
//! h   = x + MHSA(LN1 x) + PETL_attn(LN1 x)
//! out = h + FFN(LN2 h)  [+ PETL_ffn(LN2 h)   Houlsby only]
//! ```
//!
//! Backbone parameters are frozen; PETL blocks and the classifier head are
//! trainable.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{Activation, AdapterConfig, BottleneckAdapter};
use crate::data::Spectrogram;
use crate::error::{Error, Result};
use crate::graph::{Graph, Scope, Var};
use crate::moa::{BlockSite, DenseMoaLayer, RoutingTrace, SoftMoaLayer};
use crate::params::{ParamId, ParamRegistry};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SMOA1";

/// Standard deviation of positional embeddings and head weights at init.
const SMALL_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Placement {
    /// PETL block beside MHSA only.
    #[default]
    Pfeiffer,
    /// PETL blocks beside both MHSA and FFN.
    Houlsby,
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pfeiffer" => Ok(Placement::Pfeiffer),
            "houlsby" => Ok(Placement::Houlsby),
            other => Err(Error::Validation(format!("unknown placement `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Petl {
    /// Linear probing: only the head trains.
    #[default]
    None,
    Single {
        bottleneck: usize,
    },
    DenseMoa {
        experts: usize,
        bottleneck: usize,
    },
    SoftMoa {
        experts: usize,
        slots: usize,
        bottleneck: usize,
    },
}

impl Petl {
    pub fn name(&self) -> &'static str {
        match self {
            Petl::None => "none",
            Petl::Single { .. } => "single",
            Petl::DenseMoa { .. } => "dense",
            Petl::SoftMoa { .. } => "soft",
        }
    }

    pub fn bottleneck(&self) -> Option<usize> {
        match *self {
            Petl::None => None,
            Petl::Single { bottleneck } | Petl::DenseMoa { bottleneck, .. } | Petl::SoftMoa { bottleneck, .. } => {
                Some(bottleneck)
            }
        }
    }
}

/// `none`, `single:R`, `dense:N:R`, `soft:N:P:R`.
impl std::fmt::Display for Petl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Petl::None => f.write_str("none"),
            Petl::Single { bottleneck } => write!(f, "single:{bottleneck}"),
            Petl::DenseMoa { experts, bottleneck } => write!(f, "dense:{experts}:{bottleneck}"),
            Petl::SoftMoa {
                experts,
                slots,
                bottleneck,
            } => write!(f, "soft:{experts}:{slots}:{bottleneck}"),
        }
    }
}

impl std::str::FromStr for Petl {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let kind = parts.next().unwrap_or_default();
        let nums = parts
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Validation(format!("bad PETL spec `{s}`: {e}")))?;
        if nums.contains(&0) {
            return Err(Error::Validation(format!("bad PETL spec `{s}`: sizes must be positive")));
        }
        match (kind, nums.as_slice()) {
            ("none", []) => Ok(Petl::None),
            ("single", [r]) => Ok(Petl::Single { bottleneck: *r }),
            ("dense", [n, r]) => Ok(Petl::DenseMoa {
                experts: *n,
                bottleneck: *r,
            }),
            ("soft", [n, p, r]) => Ok(Petl::SoftMoa {
                experts: *n,
                slots: *p,
                bottleneck: *r,
            }),
            _ => Err(Error::Validation(format!(
                "bad PETL spec `{s}`: expected none, single:R, dense:N:R or soft:N:P:R"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub freq_bins: usize,
    pub frames: usize,
    pub patch_freq: usize,
    pub patch_time: usize,
    pub ffn_mult: usize,
    pub placement: Placement,
    pub petl: Petl,
    pub activation: Activation,
    pub n_classes: usize,
}

impl Default for EncoderConfig {
    /// Desk-scale default: 32×128 spectrograms in 8×8 patches (64 tokens).
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            freq_bins: 32,
            frames: 128,
            patch_freq: 8,
            patch_time: 8,
            ffn_mult: 4,
            placement: Placement::Pfeiffer,
            petl: Petl::None,
            activation: Activation::Gelu,
            n_classes: 10,
        }
    }
}

impl EncoderConfig {
    /// The 768-wide, 12-layer shape, for parameter counting only.
    pub fn paper_shape(petl: Petl, n_classes: usize) -> Self {
        EncoderConfig {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            freq_bins: 128,
            frames: 1024,
            patch_freq: 16,
            patch_time: 16,
            petl,
            n_classes,
            ..Default::default()
        }
    }

    pub fn n_tokens(&self) -> usize {
        (self.freq_bins / self.patch_freq) * (self.frames / self.patch_time)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_freq * self.patch_time
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("freq_bins", self.freq_bins),
            ("frames", self.frames),
            ("patch_freq", self.patch_freq),
            ("patch_time", self.patch_time),
            ("ffn_mult", self.ffn_mult),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Validation(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.freq_bins % self.patch_freq != 0 || self.frames % self.patch_time != 0 {
            return Err(Error::Validation(format!(
                "spectrogram {}x{} is not divisible into {}x{} patches",
                self.freq_bins, self.frames, self.patch_freq, self.patch_time
            )));
        }
        match self.petl {
            Petl::None => {}
            Petl::Single { bottleneck } => check_bottleneck(bottleneck, self.d_model)?,
            Petl::DenseMoa { experts, bottleneck } => {
                check_bottleneck(bottleneck, self.d_model)?;
                if experts == 0 {
                    return Err(Error::Validation("experts must be positive".into()));
                }
            }
            Petl::SoftMoa {
                experts,
                slots,
                bottleneck,
            } => {
                check_bottleneck(bottleneck, self.d_model)?;
                if experts == 0 || slots == 0 {
                    return Err(Error::Validation("experts and slots must be positive".into()));
                }
            }
        }
        Ok(())
    }

    fn sites(&self) -> &'static [BlockSite] {
        match (self.petl, self.placement) {
            (Petl::None, _) => &[],
            (_, Placement::Pfeiffer) => &[BlockSite::Attention],
            (_, Placement::Houlsby) => &[BlockSite::Attention, BlockSite::FeedForward],
        }
    }
}

fn check_bottleneck(r: usize, d: usize) -> Result<()> {
    if r == 0 || r > d {
        return Err(Error::Validation(format!("bottleneck {r} must be in 1..={d}")));
    }
    Ok(())
}

/// Rearranges a spectrogram into one flattened patch per row:
/// `L = (F/f_p)·(T/t_p)` rows of `f_p·t_p` values, frequency-major over the
/// patch grid and row-major inside each patch.
pub fn patch_matrix(spec: &Spectrogram, patch_freq: usize, patch_time: usize) -> Result<Tensor> {
    if patch_freq == 0
        || patch_time == 0
        || spec.freq_bins % patch_freq != 0
        || spec.frames % patch_time != 0
    {
        return Err(Error::Validation(format!(
            "spectrogram {}x{} is not divisible into {}x{} patches",
            spec.freq_bins, spec.frames, patch_freq, patch_time
        )));
    }
    let (gf, gt) = (spec.freq_bins / patch_freq, spec.frames / patch_time);
    let mut data = Vec::with_capacity(spec.values.len());
    for pf in 0..gf {
        for pt in 0..gt {
            for i in 0..patch_freq {
                let f = pf * patch_freq + i;
                let start = f * spec.frames + pt * patch_time;
                data.extend_from_slice(&spec.values[start..start + patch_time]);
            }
        }
    }
    Tensor::new(&[gf * gt, patch_freq * patch_time], data)
}

/// A PETL block attached beside one sub-layer.
#[derive(Clone, Debug)]
pub enum PetlBlock {
    Single(BottleneckAdapter),
    Dense(DenseMoaLayer),
    Soft(SoftMoaLayer),
}

impl PetlBlock {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, trace: Option<&mut RoutingTrace>) -> Result<Var> {
        match self {
            PetlBlock::Single(a) => a.forward(g, x),
            PetlBlock::Dense(m) => m.forward(g, x, trace),
            PetlBlock::Soft(m) => m.forward(g, x, trace),
        }
    }

    pub fn slots_per_expert(&self) -> Option<usize> {
        match self {
            PetlBlock::Soft(m) => Some(m.slots_per_expert),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn register(
        reg: &mut ParamRegistry,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Linear {
            weight: reg.register_normal(format!("{name}.weight"), &[fan_in, fan_out], std, trainable, rng)?,
            bias: reg.register(format!("{name}.bias"), Tensor::zeros(&[fan_out]), trainable)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn register(reg: &mut ParamRegistry, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: reg.register(format!("{name}.gamma"), Tensor::full(&[d], 1.0), false)?,
            beta: reg.register(format!("{name}.beta"), Tensor::zeros(&[d]), false)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layernorm(x, gm, bt)
    }
}

/// One pre-norm transformer layer and its PETL attachments.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub index: usize,
    pub n_heads: usize,
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub attn_block: Option<PetlBlock>,
    pub ffn_block: Option<PetlBlock>,
}

/// Optional captures from a forward pass.
#[derive(Clone, Debug, Default)]
pub struct SampleTrace {
    pub routing: Vec<RoutingTrace>,
    /// Attention probabilities, one `L×L` matrix per layer and head.
    pub attention: Vec<Tensor>,
}

impl EncoderLayer {
    pub fn mhsa(&self, g: &mut Graph<'_>, x: Var, mut attention: Option<&mut Vec<Tensor>>) -> Result<Var> {
        let d = g.shape(x)[1];
        let dh = d / self.n_heads;
        // 1/sqrt(d_h) is applied to Q rather than to the L×L scores.
        let q = self.q.forward(g, x)?;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt());
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let probs = g.softmax(scores, 1)?;
            if let Some(a) = attention.as_deref_mut() {
                a.push(g.value(probs).clone());
            }
            heads.push(g.matmul(probs, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.o.forward(g, cat)
    }

    pub fn ffn(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.ffn_in.forward(g, x)?;
        let h = g.gelu(h);
        self.ffn_out.forward(g, h)
    }

    fn attach(
        g: &mut Graph<'_>,
        block: &Option<PetlBlock>,
        input: Var,
        acc: Var,
        layer: usize,
        site: BlockSite,
        trace: Option<&mut SampleTrace>,
    ) -> Result<Var> {
        let Some(block) = block else { return Ok(acc) };
        let y = match trace {
            Some(t) => {
                let mut rt = RoutingTrace::new(layer, site);
                let y = block.forward(g, input, Some(&mut rt))?;
                if !matches!(block, PetlBlock::Single(_)) {
                    t.routing.push(rt);
                }
                y
            }
            None => block.forward(g, input, None)?,
        };
        g.add(acc, y)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mut trace: Option<&mut SampleTrace>) -> Result<Var> {
        let n1 = self.ln1.forward(g, x)?;
        let attn = self.mhsa(g, n1, trace.as_deref_mut().map(|t| &mut t.attention))?;
        let h = g.add(x, attn)?;
        let h = Self::attach(g, &self.attn_block, n1, h, self.index, BlockSite::Attention, trace.as_deref_mut())?;
        let n2 = self.ln2.forward(g, h)?;
        let f = self.ffn(g, n2)?;
        let out = g.add(h, f)?;
        Self::attach(g, &self.ffn_block, n2, out, self.index, BlockSite::FeedForward, trace)
    }
}

/// Encoder, head and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamRegistry,
    pub patch_proj: Linear,
    pub pos_embed: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    /// Builds a model. Backbone, PETL blocks and head draw from separate
    /// streams of `seed`, so models differing only in `petl` share the
    /// exact same backbone and head.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    /// Same parameter layout as [`Model::new`] but the frozen backbone is
    /// left zero-filled and never touched, so counting parameters of large
    /// shapes costs no real memory.
    pub fn for_counting(config: EncoderConfig) -> Result<Self> {
        Self::build(config, 0, false)
    }

    fn build(config: EncoderConfig, seed: u64, init_backbone: bool) -> Result<Self> {
        config.validate()?;
        let mut backbone_rng = stream_rng(seed, 0);
        let mut petl_rng = stream_rng(seed, 1);
        let mut head_rng = stream_rng(seed, 2);
        let mut reg = ParamRegistry::new();
        let d = config.d_model;
        let l = config.n_tokens();
        let pd = config.patch_dim();
        let hidden = config.ffn_mult * d;
        let inv = |fan_in: usize| if init_backbone { 1.0 / (fan_in as f64).sqrt() } else { 0.0 };
        let pos_std = if init_backbone { SMALL_INIT_STD } else { 0.0 };

        let patch_proj = Linear::register(&mut reg, "patch.proj", pd, d, inv(pd), false, &mut backbone_rng)?;
        let pos_embed = reg.register_normal("patch.pos", &[l, d], pos_std, false, &mut backbone_rng)?;
        let adapter_cfg = config
            .petl
            .bottleneck()
            .map(|r| AdapterConfig::new(r).with_activation(config.activation));

        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("layers.{i}");
            let rng = &mut backbone_rng;
            let ln1 = LayerNormParams::register(&mut reg, &format!("{p}.ln1"), d)?;
            let q = Linear::register(&mut reg, &format!("{p}.attn.q"), d, d, inv(d), false, rng)?;
            let k = Linear::register(&mut reg, &format!("{p}.attn.k"), d, d, inv(d), false, rng)?;
            let v = Linear::register(&mut reg, &format!("{p}.attn.v"), d, d, inv(d), false, rng)?;
            let o = Linear::register(&mut reg, &format!("{p}.attn.o"), d, d, inv(d), false, rng)?;
            let ln2 = LayerNormParams::register(&mut reg, &format!("{p}.ln2"), d)?;
            let ffn_in = Linear::register(&mut reg, &format!("{p}.ffn.in"), d, hidden, inv(d), false, rng)?;
            let ffn_out = Linear::register(&mut reg, &format!("{p}.ffn.out"), hidden, d, inv(hidden), false, rng)?;

            let mut blocks = [None, None];
            for &site in config.sites() {
                let prefix = format!("{p}.petl_{site}");
                let cfg = adapter_cfg.as_ref().expect("petl has a bottleneck");
                let block = match config.petl {
                    Petl::None => unreachable!(),
                    Petl::Single { .. } => PetlBlock::Single(BottleneckAdapter::new(&mut reg, &prefix, d, cfg, &mut petl_rng)?),
                    Petl::DenseMoa { experts, .. } => {
                        PetlBlock::Dense(DenseMoaLayer::new(&mut reg, &prefix, d, experts, cfg, &mut petl_rng)?)
                    }
                    Petl::SoftMoa { experts, slots, .. } => {
                        PetlBlock::Soft(SoftMoaLayer::new(&mut reg, &prefix, d, experts, slots, cfg, &mut petl_rng)?)
                    }
                };
                blocks[site as usize] = Some(block);
            }
            let [attn_block, ffn_block] = blocks;
            layers.push(EncoderLayer {
                index: i,
                n_heads: config.n_heads,
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                ffn_in,
                ffn_out,
                attn_block,
                ffn_block,
            });
        }
        let head = Linear::register(&mut reg, "head", d, config.n_classes, SMALL_INIT_STD, true, &mut head_rng)?;
        Ok(Model {
            config,
            params: reg,
            patch_proj,
            pos_embed,
            layers,
            head,
        })
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.")
    }

    pub fn is_petl_param(name: &str) -> bool {
        name.contains(".petl_")
    }

    pub fn is_backbone_param(name: &str) -> bool {
        !Self::is_head_param(name) && !Self::is_petl_param(name)
    }

    /// Makes the backbone trainable (pretraining) or frozen (adaptation).
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        let ids: Vec<ParamId> = self
            .params
            .iter()
            .filter(|(_, p)| Self::is_backbone_param(&p.name))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.params.set_trainable(id, trainable);
        }
    }

    /// `(frozen names, trainable names)` in registration order.
    pub fn param_partition(&self) -> (Vec<String>, Vec<String>) {
        let mut frozen = Vec::new();
        let mut trainable = Vec::new();
        for (_, p) in self.params.iter() {
            if p.trainable() {
                trainable.push(p.name.clone());
            } else {
                frozen.push(p.name.clone());
            }
        }
        (frozen, trainable)
    }

    /// Trainable scalars outside the classifier head.
    pub fn trainable_non_head(&self) -> usize {
        self.params.count_matching(|p| p.trainable() && !Self::is_head_param(&p.name))
    }

    pub fn head_param_count(&self) -> usize {
        self.params.count_matching(|p| Self::is_head_param(&p.name))
    }

    /// Patch tokens plus positional embeddings, `L×d`.
    pub fn embed(&self, g: &mut Graph<'_>, spec: &Spectrogram) -> Result<Var> {
        if spec.freq_bins != self.config.freq_bins || spec.frames != self.config.frames {
            return Err(Error::dim(
                "embed",
                &[spec.freq_bins, spec.frames],
                &[self.config.freq_bins, self.config.frames],
            ));
        }
        let patches = patch_matrix(spec, self.config.patch_freq, self.config.patch_time)?;
        let p = g.constant(patches);
        let tokens = self.patch_proj.forward(g, p)?;
        let pos = g.param(self.pos_embed);
        g.add(tokens, pos)
    }

    /// Mean-pooled final token sequence for one sample, `1×d`.
    pub fn encode(&self, g: &mut Graph<'_>, spec: &Spectrogram, mut trace: Option<&mut SampleTrace>) -> Result<Var> {
        let mut x = self.embed(g, spec)?;
        for layer in &self.layers {
            x = layer.forward(g, x, trace.as_deref_mut())?;
        }
        g.mean_rows(x)
    }

    /// Logits `B×n_classes` for a batch. `g` must borrow `self.params`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        batch: &[&Spectrogram],
        mut traces: Option<&mut Vec<SampleTrace>>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut pooled = Vec::with_capacity(batch.len());
        for spec in batch {
            let mut t = traces.is_some().then(SampleTrace::default);
            pooled.push(self.encode(g, spec, t.as_mut())?);
            if let (Some(all), Some(t)) = (traces.as_deref_mut(), t) {
                all.push(t);
            }
        }
        let feats = if pooled.len() == 1 { pooled[0] } else { g.concat_rows(&pooled)? };
        let prev = g.set_scope(Scope::Head);
        let logits = self.head.forward(g, feats);
        g.set_scope(prev);
        logits
    }

    /// Logits as a plain tensor, no gradient bookkeeping kept.
    pub fn logits(&self, batch: &[&Spectrogram]) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.params);
        let out = self.forward(&mut g, batch, None)?;
        Ok(g.value(out).clone())
    }

    /// Per-sample routing traces (and attention maps) without gradients.
    pub fn trace(&self, spec: &Spectrogram) -> Result<SampleTrace> {
        let mut g = Graph::with_params(&self.params);
        let mut t = SampleTrace::default();
        self.encode(&mut g, spec, Some(&mut t))?;
        Ok(t)
    }

    /// Mean cross-entropy of a batch; returns the graph's loss node.
    pub fn loss(&self, g: &mut Graph<'_>, batch: &[&Spectrogram], labels: &[usize]) -> Result<Var> {
        let logits = self.forward(g, batch, None)?;
        g.cross_entropy(logits, labels)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        Checkpoint::from_registry(&self.params).write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Copies every parameter from `ckpt`; names and shapes must match
    /// exactly. Trainable flags are kept as configured.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.entries.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, model has {}",
                ckpt.entries.len(),
                self.params.len()
            )));
        }
        self.copy_from(ckpt, |_| true)
    }

    /// Copies backbone parameters only (patch embedding, layers), leaving
    /// PETL blocks and head untouched.
    pub fn load_backbone(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.copy_from(ckpt, Self::is_backbone_param)
    }

    fn copy_from(&mut self, ckpt: &Checkpoint, select: impl Fn(&str) -> bool) -> Result<()> {
        let wanted: Vec<(ParamId, String)> = self
            .params
            .iter()
            .filter(|(_, p)| select(&p.name))
            .map(|(id, p)| (id, p.name.clone()))
            .collect();
        for (id, name) in wanted {
            let entry = ckpt
                .get(&name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter `{name}`")))?;
            let t = self.params.tensor_mut(id);
            if entry.shape != t.shape() {
                return Err(Error::dim("load_checkpoint", &entry.shape, t.shape()));
            }
            t.data_mut().copy_from_slice(&entry.data);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

/// Parameter snapshot in the `SMOA1` format:
///
/// ```text
/// "SMOA1" | count u32
/// per entry: name_len u32 | name utf-8 | trainable u8 | rank u32 | dims u32×rank
/// payloads: f64 little-endian, entries in manifest order
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_registry(reg: &ParamRegistry) -> Self {
        Checkpoint {
            entries: reg
                .iter()
                .map(|(_, p)| CheckpointEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    trainable: p.trainable(),
                    data: p.tensor.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.trainable as u8])?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for e in &self.entries {
            for v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format {
                    offset: *pos as u64,
                    msg: format!("truncated while reading {what}"),
                });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize, what: &str| -> Result<u32> {
            let b = take(pos, 4, what)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        if take(&mut pos, 5, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected \"SMOA1\"".into(),
            });
        }
        let count = u32_at(&mut pos, "count")? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = pos as u64;
            let len = u32_at(&mut pos, "name length")? as usize;
            let name = std::str::from_utf8(take(&mut pos, len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at,
                    msg: "parameter name is not utf-8".into(),
                })?
                .to_string();
            let trainable = match take(&mut pos, 1, "trainable flag")?[0] {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::Format {
                        offset: pos as u64 - 1,
                        msg: format!("trainable flag {other}"),
                    })
                }
            };
            let rank = u32_at(&mut pos, "rank")? as usize;
            let shape = (0..rank)
                .map(|_| u32_at(&mut pos, "dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape, trainable));
        }
        let mut entries = Vec::with_capacity(manifest.len());
        for (name, shape, trainable) in manifest {
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, 8 * numel, "payload")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push(CheckpointEntry {
                name,
                shape,
                trainable,
                data,
            });
        }
        if pos != bytes.len() {
            return Err(Error::Format {
                offset: pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - pos),
            });
        }
        Ok(Checkpoint { entries })
    }
}
