use std::fmt;
use std::time::{Duration, Instant};

use softmoa::data::Spectrogram;
use softmoa::encoder::Petl;
use softmoa::flops::{BlockFlops, FlopReport};
use softmoa::training::{train_step, AdamWConfig, OptimState};

use super::build_model;
use crate::config::RunConfig;
use crate::report::{mad, mean, median, write_csv};
use crate::{CliError, Result};

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub variant: Petl,
    pub tokens: usize,
    pub trainable_non_head: usize,
    /// Wall time of each timed step.
    pub step_ms: Vec<f64>,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub mad_ms: f64,
    /// PETL-path multiply-adds per sample, whole model.
    pub flops: BlockFlops,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub steps: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub timer_resolution: Duration,
    pub rows: Vec<BenchRow>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant.name() == name)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} timed steps after {} warmup, batch {}, timer resolution {:?}",
            self.steps, self.warmup, self.batch_size, self.timer_resolution
        )?;
        let base = self.rows.first().map_or(1.0, |r| r.median_ms);
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} median {:>9.2} ms  mean {:>9.2} ms  mad {:>7.2} ms  x{:<5.2} petl MACs/sample {}",
                r.variant.to_string(),
                r.median_ms,
                r.mean_ms,
                r.mad_ms,
                r.median_ms / base,
                r.flops.total()
            )?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// Smallest observable non-zero step of the monotonic clock.
fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Times full training steps (forward, backward, AdamW) for each variant on
/// the same batches from the same initialization. After per-variant warmup
/// the timed steps are interleaved across variants. Writes `bench.csv` and
/// `bench_steps.csv`.
pub fn run(cfg: &RunConfig) -> Result<BenchReport> {
    let variants = if cfg.bench.variants.is_empty() {
        vec![cfg.model.petl]
    } else {
        cfg.bench.variants.clone()
    };
    let tasks = cfg.tasks()?;
    let data = &tasks[0].train;
    let bs = cfg.train.batch_size.min(data.len());
    if bs == 0 {
        return Err(CliError::Config("benchmark needs a non-empty training set".into()));
    }
    let batches: Vec<(Vec<&Spectrogram>, Vec<usize>)> = (0..data.len() / bs)
        .map(|b| {
            let idx = b * bs..(b + 1) * bs;
            (data.spectrograms[idx.clone()].iter().collect(), data.labels[idx].to_vec())
        })
        .collect();

    let resolution = timer_resolution();
    let mut runs = Vec::with_capacity(variants.len());
    for &variant in &variants {
        let mut model = build_model(cfg, variant, data.n_classes)?;
        let mut opt = OptimState::new(
            &model.params,
            AdamWConfig {
                weight_decay: cfg.train.weight_decay,
                ..Default::default()
            },
        );
        for step in 0..cfg.bench.warmup {
            let (batch, labels) = &batches[step % batches.len()];
            train_step(&mut model, &mut opt, batch, labels, cfg.train.lr_max)?;
        }
        runs.push((model, opt, Vec::with_capacity(cfg.bench.steps)));
    }
    // Round-robin so every variant sees the same allocator and machine state.
    for step in cfg.bench.warmup..cfg.bench.warmup + cfg.bench.steps {
        let (batch, labels) = &batches[step % batches.len()];
        for (model, opt, times) in runs.iter_mut() {
            let t0 = Instant::now();
            train_step(model, opt, batch, labels, cfg.train.lr_max)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    let rows: Vec<BenchRow> = variants
        .iter()
        .zip(runs)
        .map(|(&variant, (model, _, times))| {
            log::info!("{variant}: median {:.2} ms", median(&times));
            BenchRow {
                variant,
                tokens: cfg.model.n_tokens(),
                trainable_non_head: model.trainable_non_head(),
                median_ms: median(&times),
                mean_ms: mean(&times),
                mad_ms: mad(&times),
                step_ms: times,
                flops: FlopReport::for_config(&model.config).totals(),
            }
        })
        .collect();

    let mut warnings = Vec::new();
    let res_ms = resolution.as_secs_f64() * 1e3;
    let fastest = rows.iter().map(|r| r.median_ms).fold(f64::INFINITY, f64::min);
    if res_ms > 1.0 || res_ms > 0.01 * fastest {
        let w = format!("timer resolution {res_ms:.3} ms is coarse against a {fastest:.3} ms step");
        log::warn!("{w}");
        warnings.push(w);
    }

    let base = rows.first().map_or(1.0, |r| r.median_ms);
    let summary: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.to_string(),
                r.tokens.to_string(),
                bs.to_string(),
                cfg.bench.warmup.to_string(),
                r.step_ms.len().to_string(),
                r.trainable_non_head.to_string(),
                r.median_ms.to_string(),
                r.mean_ms.to_string(),
                r.mad_ms.to_string(),
                (r.median_ms / base).to_string(),
                r.flops.expert.to_string(),
                r.flops.router.to_string(),
                r.flops.dispatch.to_string(),
                r.flops.combine.to_string(),
                r.flops.total().to_string(),
            ]
        })
        .collect();
    write_csv(
        &cfg.out.join("bench.csv"),
        &cfg.hash,
        &[
            "variant",
            "tokens",
            "batch_size",
            "warmup",
            "steps",
            "trainable_non_head",
            "median_ms",
            "mean_ms",
            "mad_ms",
            "median_ratio",
            "expert_macs",
            "router_macs",
            "dispatch_macs",
            "combine_macs",
            "petl_macs",
        ],
        &summary,
    )?;
    let per_step: Vec<Vec<String>> = rows
        .iter()
        .flat_map(|r| {
            r.step_ms
                .iter()
                .enumerate()
                .map(move |(i, ms)| vec![r.variant.to_string(), i.to_string(), ms.to_string()])
        })
        .collect();
    write_csv(&cfg.out.join("bench_steps.csv"), &cfg.hash, &["variant", "step", "step_ms"], &per_step)?;

    Ok(BenchReport {
        steps: cfg.bench.steps,
        warmup: cfg.bench.warmup,
        batch_size: bs,
        timer_resolution: resolution,
        rows,
        warnings,
    })
}
