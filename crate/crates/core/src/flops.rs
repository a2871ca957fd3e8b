//! Analytic multiply-add counts for the PETL path.
//!
//! Every figure is in multiply-accumulate operations (one multiply plus one
//! add), the same unit the graph's counters use: a product `[m×k]·[k×n]` is
//! `m·k·n`, a column-broadcast scale of `[m×n]` is `m·n`. Bias additions,
//! softmaxes and nonlinearities are not counted.

use crate::encoder::{EncoderConfig, Petl, Placement};
use crate::graph::{OpCounters, Scope};

/// Multiply-adds of one PETL block on one sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockFlops {
    pub expert: u64,
    pub router: u64,
    pub dispatch: u64,
    pub combine: u64,
    /// Rows processed by experts: `L` per expert for dense, `p` for soft.
    pub expert_rows: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.expert + self.router + self.dispatch + self.combine
    }

    fn times(self, k: u64) -> Self {
        BlockFlops {
            expert: self.expert * k,
            router: self.router * k,
            dispatch: self.dispatch * k,
            combine: self.combine * k,
            expert_rows: self.expert_rows * k,
        }
    }
}

/// One block over `L` tokens of width `d`.
///
/// - single: `L·2dr`
/// - dense: experts `N·L·2dr`, router `L·d·N`, gated combine `N·L·d`
/// - soft: experts `N·p·2dr`, slot logits `L·d·N·p`, dispatch `N·p·L·d`,
///   combine `L·N·p·d`
pub fn flop_model(l: usize, d: usize, petl: Petl) -> BlockFlops {
    let (l, d) = (l as u64, d as u64);
    match petl {
        Petl::None => BlockFlops::default(),
        Petl::Single { bottleneck } => {
            let r = bottleneck as u64;
            BlockFlops {
                expert: l * 2 * d * r,
                expert_rows: l,
                ..Default::default()
            }
        }
        Petl::DenseMoa { experts, bottleneck } => {
            let (n, r) = (experts as u64, bottleneck as u64);
            BlockFlops {
                expert: n * l * 2 * d * r,
                router: l * d * n,
                dispatch: 0,
                combine: n * l * d,
                expert_rows: n * l,
            }
        }
        Petl::SoftMoa {
            experts,
            slots,
            bottleneck,
        } => {
            let (n, p, r) = (experts as u64, slots as u64, bottleneck as u64);
            BlockFlops {
                expert: n * p * 2 * d * r,
                router: l * d * n * p,
                dispatch: n * p * l * d,
                combine: l * n * p * d,
                expert_rows: n * p,
            }
        }
    }
}

/// PETL-path multiply-adds of a whole model for one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub tokens: usize,
    pub per_block: BlockFlops,
    /// `(layer, blocks in that layer)`.
    pub layers: Vec<(usize, usize)>,
}

impl FlopReport {
    pub fn for_config(cfg: &EncoderConfig) -> Self {
        let blocks = match (cfg.petl, cfg.placement) {
            (Petl::None, _) => 0,
            (_, Placement::Pfeiffer) => 1,
            (_, Placement::Houlsby) => 2,
        };
        FlopReport {
            tokens: cfg.n_tokens(),
            per_block: flop_model(cfg.n_tokens(), cfg.d_model, cfg.petl),
            layers: (0..cfg.n_layers).map(|i| (i, blocks)).collect(),
        }
    }

    pub fn per_layer(&self, layer: usize) -> BlockFlops {
        let blocks = self.layers.iter().find(|(i, _)| *i == layer).map_or(0, |(_, b)| *b);
        self.per_block.times(blocks as u64)
    }

    /// Totals per forward pass of one sample.
    pub fn totals(&self) -> BlockFlops {
        let blocks: usize = self.layers.iter().map(|(_, b)| b).sum();
        self.per_block.times(blocks as u64)
    }

    /// Same quantities read from instrumented counters.
    pub fn from_counters(c: &OpCounters) -> BlockFlops {
        BlockFlops {
            expert: c.macs(Scope::Expert),
            router: c.macs(Scope::Router),
            dispatch: c.macs(Scope::Dispatch),
            combine: c.macs(Scope::Combine),
            expert_rows: c.expert_rows,
        }
    }
}
