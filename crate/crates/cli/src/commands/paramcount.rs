use std::fmt;

use softmoa::encoder::{Model, Petl};
use softmoa::flops::{BlockFlops, FlopReport};

use crate::config::RunConfig;
use crate::report::write_csv;
use crate::Result;

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub petl: Petl,
    pub n_classes: usize,
    pub trainable_non_head: usize,
    pub head: usize,
    pub frozen: usize,
    pub flops: FlopReport,
}

impl ParamReport {
    pub fn trainable(&self) -> usize {
        self.trainable_non_head + self.head
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "petl                {}", self.petl)?;
        writeln!(f, "trainable non-head  {}", self.trainable_non_head)?;
        writeln!(f, "head ({:>3} classes)  {}", self.n_classes, self.head)?;
        writeln!(f, "trainable total     {}", self.trainable())?;
        writeln!(f, "frozen              {}", self.frozen)?;
        let t = self.flops.totals();
        writeln!(
            f,
            "petl MACs/sample    {} (expert {}, router {}, dispatch {}, combine {}) over {} tokens",
            t.total(),
            t.expert,
            t.router,
            t.dispatch,
            t.combine,
            self.flops.tokens
        )
    }
}

/// Counts parameters by partition without initializing weights, so the
/// paper-shape preset is instant. Writes `paramcount.csv` and `flops.csv`.
pub fn run(cfg: &RunConfig) -> Result<ParamReport> {
    let n_classes = cfg.n_classes()?;
    let model = Model::for_counting(cfg.encoder(cfg.model.petl, n_classes))?;
    let report = ParamReport {
        petl: cfg.model.petl,
        n_classes,
        trainable_non_head: model.trainable_non_head(),
        head: model.head_param_count(),
        frozen: model.params.count(false),
        flops: FlopReport::for_config(&model.config),
    };
    let t = report.flops.totals();
    write_csv(
        &cfg.out.join("paramcount.csv"),
        &cfg.hash,
        &[
            "petl",
            "n_classes",
            "trainable_non_head",
            "head",
            "trainable",
            "frozen",
            "tokens",
            "petl_macs",
        ],
        &[vec![
            report.petl.to_string(),
            n_classes.to_string(),
            report.trainable_non_head.to_string(),
            report.head.to_string(),
            report.trainable().to_string(),
            report.frozen.to_string(),
            report.flops.tokens.to_string(),
            t.total().to_string(),
        ]],
    )?;
    let flop_row = |label: String, b: BlockFlops| {
        vec![
            label,
            b.expert.to_string(),
            b.router.to_string(),
            b.dispatch.to_string(),
            b.combine.to_string(),
            b.expert_rows.to_string(),
            b.total().to_string(),
        ]
    };
    let mut rows: Vec<Vec<String>> = report
        .flops
        .layers
        .iter()
        .map(|&(l, _)| flop_row(l.to_string(), report.flops.per_layer(l)))
        .collect();
    rows.push(flop_row("total".into(), t));
    write_csv(
        &cfg.out.join("flops.csv"),
        &cfg.hash,
        &["layer", "expert", "router", "dispatch", "combine", "expert_rows", "total"],
        &rows,
    )?;
    Ok(report)
}
