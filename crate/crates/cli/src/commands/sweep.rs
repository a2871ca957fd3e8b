use std::fmt;

use softmoa::encoder::{Model, Petl};
use softmoa::training::{accuracy, train};

use super::build_model;
use crate::config::{RunConfig, SweepMode};
use crate::report::{median, opt, write_csv};
use crate::{CliError, Result};

/// Adapters/slots grid of the N/p trade-off study.
pub const SLOT_GRID: [(usize, usize); 6] = [(2, 14), (4, 6), (6, 4), (8, 3), (12, 2), (24, 1)];

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub setting: String,
    /// `None` when the setting cannot meet the budget.
    pub petl: Option<Petl>,
    pub params: Option<usize>,
    pub accuracy: Option<f64>,
    pub step_ms: Option<f64>,
}

impl SweepRow {
    pub fn feasible(&self) -> bool {
        self.petl.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub mode: SweepMode,
    pub budget: Option<usize>,
    pub rows: Vec<SweepRow>,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sweep mode {}", self.mode)?;
        match self.budget {
            Some(b) => writeln!(f, ", budget {b} non-head parameters")?,
            None => writeln!(f)?,
        }
        for r in &self.rows {
            match r.petl {
                Some(p) => writeln!(
                    f,
                    "{:<8} {:<16} params {:>9}  accuracy {}  step {:.2} ms",
                    r.setting,
                    p.to_string(),
                    r.params.unwrap_or(0),
                    r.accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                    r.step_ms.unwrap_or(f64::NAN)
                )?,
                None => writeln!(f, "{:<8} infeasible", r.setting)?,
            }
        }
        Ok(())
    }
}

fn with_bottleneck(petl: Petl, r: usize) -> Petl {
    match petl {
        Petl::None => Petl::None,
        Petl::Single { .. } => Petl::Single { bottleneck: r },
        Petl::DenseMoa { experts, .. } => Petl::DenseMoa { experts, bottleneck: r },
        Petl::SoftMoa { experts, slots, .. } => Petl::SoftMoa {
            experts,
            slots,
            bottleneck: r,
        },
    }
}

fn count(cfg: &RunConfig, petl: Petl, n_classes: usize) -> Result<usize> {
    Ok(Model::for_counting(cfg.encoder(petl, n_classes))?.trainable_non_head())
}

/// The bottleneck whose non-head count is nearest `budget`. `None` when even
/// `r = 1` exceeds the budget or the solution is wider than the model.
pub fn solve_bottleneck(cfg: &RunConfig, shape: Petl, n_classes: usize, budget: usize) -> Result<Option<usize>> {
    let c1 = count(cfg, with_bottleneck(shape, 1), n_classes)?;
    if c1 > budget {
        return Ok(None);
    }
    if cfg.model.d_model < 2 {
        return Ok(Some(1));
    }
    let slope = count(cfg, with_bottleneck(shape, 2), n_classes)? - c1;
    let r = 1 + ((budget - c1) as f64 / slope as f64).round() as usize;
    Ok((r <= cfg.model.d_model).then_some(r))
}

fn grid_numbers(cfg: &RunConfig) -> Result<Vec<usize>> {
    if cfg.sweep.grid.is_empty() {
        return Err(CliError::Config("config key `sweep.grid`: empty grid".into()));
    }
    cfg.sweep
        .grid
        .iter()
        .map(|s| {
            s.parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| CliError::Config(format!("config key `sweep.grid`: `{s}` is not a positive integer")))
        })
        .collect()
}

fn slot_grid(cfg: &RunConfig) -> Result<Vec<(usize, usize)>> {
    if cfg.sweep.grid.is_empty() {
        return Ok(SLOT_GRID.to_vec());
    }
    cfg.sweep
        .grid
        .iter()
        .map(|s| {
            let parsed = s
                .split_once('/')
                .and_then(|(n, p)| Some((n.trim().parse::<usize>().ok()?, p.trim().parse::<usize>().ok()?)))
                .filter(|&(n, p)| n > 0 && p > 0);
            parsed.ok_or_else(|| CliError::Config(format!("config key `sweep.grid`: `{s}` is not N/p")))
        })
        .collect()
}

/// One row per grid point, each trained from the same seed on the first task.
/// Writes `sweep.csv`.
pub fn run(cfg: &RunConfig) -> Result<SweepReport> {
    let tasks = cfg.tasks()?;
    let task = &tasks[0];
    let k = task.train.n_classes;
    let base = cfg.model.petl;
    let default_budget = || -> Result<usize> {
        match cfg.sweep.budget {
            Some(b) => Ok(b),
            None if base == Petl::None => Err(CliError::Config(
                "config key `sweep.budget`: needed when petl = none".into(),
            )),
            None => count(cfg, base, k),
        }
    };

    let (budget, plan): (Option<usize>, Vec<(String, Option<Petl>)>) = match cfg.sweep.mode {
        SweepMode::Budget => {
            let plan = grid_numbers(cfg)?
                .into_iter()
                .map(|v| {
                    let petl = match base {
                        Petl::None => {
                            return Err(CliError::Config("config key `petl`: budget sweep needs a PETL variant".into()))
                        }
                        Petl::Single { .. } => Petl::Single { bottleneck: v },
                        Petl::DenseMoa { bottleneck, .. } => Petl::DenseMoa { experts: v, bottleneck },
                        Petl::SoftMoa { slots, bottleneck, .. } => Petl::SoftMoa {
                            experts: v,
                            slots,
                            bottleneck,
                        },
                    };
                    cfg.encoder(petl, k)
                        .validate()
                        .map_err(|e| CliError::Config(format!("config key `sweep.grid`: {e}")))?;
                    Ok((v.to_string(), Some(petl)))
                })
                .collect::<Result<_>>()?;
            (None, plan)
        }
        SweepMode::Adapters => {
            let budget = default_budget()?;
            let plan = grid_numbers(cfg)?
                .into_iter()
                .map(|n| {
                    let shape = match base {
                        Petl::DenseMoa { .. } => Petl::DenseMoa { experts: n, bottleneck: 1 },
                        Petl::SoftMoa { slots, .. } => Petl::SoftMoa {
                            experts: n,
                            slots,
                            bottleneck: 1,
                        },
                        _ => {
                            return Err(CliError::Config(
                                "config key `petl`: adapters sweep needs dense or soft".into(),
                            ))
                        }
                    };
                    let r = solve_bottleneck(cfg, shape, k, budget)?;
                    Ok((n.to_string(), r.map(|r| with_bottleneck(shape, r))))
                })
                .collect::<Result<_>>()?;
            (Some(budget), plan)
        }
        SweepMode::Slots => {
            let budget = default_budget()?;
            let plan = slot_grid(cfg)?
                .into_iter()
                .map(|(n, p)| {
                    let shape = Petl::SoftMoa {
                        experts: n,
                        slots: p,
                        bottleneck: 1,
                    };
                    let r = solve_bottleneck(cfg, shape, k, budget)?;
                    Ok((format!("{n}/{p}"), r.map(|r| with_bottleneck(shape, r))))
                })
                .collect::<Result<_>>()?;
            (Some(budget), plan)
        }
    };

    let mut rows = Vec::with_capacity(plan.len());
    for (setting, petl) in plan {
        let Some(petl) = petl else {
            log::warn!("sweep setting {setting} cannot meet the budget");
            rows.push(SweepRow {
                setting,
                petl: None,
                params: None,
                accuracy: None,
                step_ms: None,
            });
            continue;
        };
        let mut model = build_model(cfg, petl, k)?;
        let log = train(&mut model, &task.train, None, &cfg.train)?;
        let acc = match &task.test {
            Some(t) => accuracy(&model, t, cfg.train.batch_size)?,
            None => accuracy(&model, &task.train, cfg.train.batch_size)?,
        };
        let step_ms: Vec<f64> = log.steps.iter().map(|s| s.step_ms).collect();
        log::info!("sweep {setting} {petl}: accuracy {acc:.4}");
        rows.push(SweepRow {
            setting,
            petl: Some(petl),
            params: Some(model.trainable_non_head()),
            accuracy: Some(acc),
            step_ms: Some(median(&step_ms)),
        });
    }

    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                cfg.sweep.mode.to_string(),
                r.setting.clone(),
                r.petl.map(|p| p.to_string()).unwrap_or_default(),
                r.petl.and_then(|p| p.bottleneck()).map(|b| b.to_string()).unwrap_or_default(),
                budget.map(|b| b.to_string()).unwrap_or_default(),
                r.params.map(|p| p.to_string()).unwrap_or_default(),
                r.feasible().to_string(),
                opt(r.accuracy),
                opt(r.step_ms),
            ]
        })
        .collect();
    write_csv(
        &cfg.out.join("sweep.csv"),
        &cfg.hash,
        &[
            "mode",
            "setting",
            "petl",
            "bottleneck",
            "budget",
            "params",
            "feasible",
            "accuracy",
            "step_ms",
        ],
        &csv,
    )?;
    Ok(SweepReport {
        mode: cfg.sweep.mode,
        budget,
        rows,
    })
}
