use std::collections::BTreeMap;
use std::fmt;

use softmoa::encoder::{Checkpoint, Model, Petl};
use softmoa::moa::{expert_contribution, per_class_contribution, BlockSite, ClassContribution, RoutingTrace};

use crate::config::RunConfig;
use crate::report::{opt, write_csv};
use crate::{CliError, Result};

/// Contributions of one Soft-MoA block.
#[derive(Clone, Debug)]
pub struct BlockContribution {
    pub layer: usize,
    pub site: BlockSite,
    /// Mean over samples of each expert's average combine weight.
    pub contribution: Vec<f64>,
    pub per_class: ClassContribution,
}

#[derive(Clone, Debug)]
pub struct AnalyzeReport {
    pub samples: usize,
    pub blocks: Vec<BlockContribution>,
    /// Expert × class contributions averaged over the selected blocks.
    pub mean_per_class: Vec<Vec<Option<f64>>>,
}

impl fmt::Display for AnalyzeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} samples", self.samples)?;
        for b in &self.blocks {
            let cells: Vec<String> = b.contribution.iter().map(|c| format!("{c:.4}")).collect();
            writeln!(f, "layer {:>2} {:<4} [{}]", b.layer, b.site.to_string(), cells.join(", "))?;
        }
        Ok(())
    }
}

/// Loads a Soft-MoA checkpoint, traces every sample of the evaluation set and
/// aggregates combine weights per expert. Writes `contributions.csv` and
/// `per_class.csv`.
pub fn run(cfg: &RunConfig) -> Result<AnalyzeReport> {
    let Petl::SoftMoa { slots, .. } = cfg.model.petl else {
        return Err(CliError::Config(format!(
            "analyze needs a Soft-MoA model, config has petl = {}",
            cfg.model.petl
        )));
    };
    let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"));
    let ckpt = Checkpoint::read(&path)?;
    if !ckpt.entries.iter().any(|e| e.name.ends_with(".phi")) {
        return Err(CliError::Config(format!(
            "{} is not a Soft-MoA checkpoint (no slot parameters)",
            path.display()
        )));
    }
    let n_classes = ckpt
        .get("head.bias")
        .map(|e| e.shape[0])
        .ok_or_else(|| CliError::Config(format!("{} has no classifier head", path.display())))?;
    let mut model = Model::new(cfg.encoder(cfg.model.petl, n_classes), cfg.seed)?;
    model.load_checkpoint(&ckpt)?;
    let layers = cfg
        .layers
        .resolve(cfg.model.n_layers)
        .map_err(|e| CliError::Config(format!("config key `analyze.layers`: {e}")))?;

    let tasks = cfg.tasks()?;
    let data = tasks[0].test.as_ref().unwrap_or(&tasks[0].train);
    if data.n_classes > n_classes {
        return Err(CliError::Config(format!(
            "dataset has {} classes, checkpoint head has {n_classes}",
            data.n_classes
        )));
    }
    let mut by_block: BTreeMap<(usize, BlockSite), Vec<RoutingTrace>> = BTreeMap::new();
    for spec in &data.spectrograms {
        for t in model.trace(spec)?.routing {
            if layers.contains(&t.layer) {
                by_block.entry((t.layer, t.site)).or_default().push(t);
            }
        }
    }

    let mut blocks = Vec::with_capacity(by_block.len());
    for ((layer, site), traces) in &by_block {
        let mut contribution: Vec<f64> = Vec::new();
        for t in traces {
            let c = expert_contribution(t, slots)?;
            if contribution.is_empty() {
                contribution = vec![0.0; c.len()];
            }
            contribution.iter_mut().zip(c).for_each(|(acc, v)| *acc += v);
        }
        contribution.iter_mut().for_each(|v| *v /= traces.len() as f64);
        blocks.push(BlockContribution {
            layer: *layer,
            site: *site,
            contribution,
            per_class: per_class_contribution(traces, &data.labels, slots, n_classes)?,
        });
    }

    let n_experts = blocks.first().map_or(0, |b| b.contribution.len());
    let mean_per_class: Vec<Vec<Option<f64>>> = (0..n_experts)
        .map(|i| {
            (0..n_classes)
                .map(|k| {
                    let vals: Option<Vec<f64>> = blocks.iter().map(|b| b.per_class.values[i][k]).collect();
                    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect()
        })
        .collect();

    let mut contrib_rows = Vec::new();
    let mut class_rows = Vec::new();
    for b in &blocks {
        for (i, c) in b.contribution.iter().enumerate() {
            contrib_rows.push(vec![b.layer.to_string(), b.site.to_string(), i.to_string(), c.to_string()]);
            for k in 0..n_classes {
                class_rows.push(vec![
                    b.layer.to_string(),
                    b.site.to_string(),
                    i.to_string(),
                    k.to_string(),
                    b.per_class.samples_per_class[k].to_string(),
                    opt(b.per_class.values[i][k]),
                ]);
            }
        }
    }
    if let Some(first) = blocks.first() {
        for (i, row) in mean_per_class.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                class_rows.push(vec![
                    "mean".into(),
                    "all".into(),
                    i.to_string(),
                    k.to_string(),
                    first.per_class.samples_per_class[k].to_string(),
                    opt(*v),
                ]);
            }
        }
    }
    write_csv(
        &cfg.out.join("contributions.csv"),
        &cfg.hash,
        &["layer", "site", "expert", "contribution"],
        &contrib_rows,
    )?;
    write_csv(
        &cfg.out.join("per_class.csv"),
        &cfg.hash,
        &["layer", "site", "expert", "class", "samples", "contribution"],
        &class_rows,
    )?;
    Ok(AnalyzeReport {
        samples: data.len(),
        blocks,
        mean_per_class,
    })
}
