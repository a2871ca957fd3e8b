use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softmoa::data::Spectrogram;
use softmoa::encoder::Model;
use softmoa::gradcheck::{gradcheck, GradcheckReport, STEP};

use crate::config::RunConfig;
use crate::report::write_csv;
use crate::{CliError, Result};

/// Largest trainable set the command will difference numerically.
pub const MAX_TRAINABLE: usize = 10_000;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub trainable_scalars: usize,
    pub report: GradcheckReport,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

impl fmt::Display for GradcheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.report.params {
            writeln!(
                f,
                "{:<40} {:>6}  abs {:.3e}  rel {:.3e}  {}",
                p.name,
                p.numel,
                p.max_abs_err,
                p.max_rel_err,
                if p.max_rel_err <= self.report.tolerance { "ok" } else { "FAIL" }
            )?;
        }
        writeln!(
            f,
            "{} trainable scalars, worst relative error {:.3e} (tolerance {:e}): {}",
            self.trainable_scalars,
            self.report.worst(),
            self.report.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Central differences at `h = 1e-5` against backprop for every trainable
/// tensor of the configured model. The PETL parameters are first drawn at
/// random so zero-initialized up-projections do not hide gradient paths.
/// Writes `gradcheck.csv`.
pub fn run(cfg: &RunConfig) -> Result<GradcheckOutcome> {
    let tasks = cfg.tasks()?;
    let data = &tasks[0].train;
    let mut model = Model::new(cfg.encoder(cfg.model.petl, data.n_classes), cfg.seed)?;
    let trainable_scalars = model.params.count(true);
    if trainable_scalars > MAX_TRAINABLE {
        return Err(CliError::Config(format!(
            "gradcheck needs a tiny model: {trainable_scalars} trainable scalars exceed {MAX_TRAINABLE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    model.params.randomize_trainable(cfg.gradcheck_init_std, &mut rng)?;

    let n = cfg.gradcheck_batch.min(data.len());
    let batch: Vec<&Spectrogram> = data.spectrograms[..n].iter().collect();
    let labels = &data.labels[..n];
    let graph_model = model.clone();
    let report = gradcheck(&mut model.params, |g| graph_model.loss(g, &batch, labels), STEP, TOLERANCE)?;

    let rows: Vec<Vec<String>> = report
        .params
        .iter()
        .map(|p| {
            vec![
                p.name.clone(),
                p.numel.to_string(),
                p.max_abs_err.to_string(),
                p.max_rel_err.to_string(),
                (p.max_rel_err <= report.tolerance).to_string(),
            ]
        })
        .collect();
    write_csv(
        &cfg.out.join("gradcheck.csv"),
        &cfg.hash,
        &["param", "numel", "max_abs_err", "max_rel_err", "pass"],
        &rows,
    )?;
    Ok(GradcheckOutcome {
        trainable_scalars,
        report,
    })
}
