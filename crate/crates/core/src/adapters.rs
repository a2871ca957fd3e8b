//! Bottleneck adapters: the expert unit of every PETL block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Scope, Var};
use crate::params::{ParamId, ParamRegistry};

/// Standard deviation of the down-projection at initialization.
pub const DOWN_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Validation(format!("unknown activation `{other}`"))),
        }
    }
}

/// Expert architecture. Only the bottleneck adapter exists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExpertKind {
    #[default]
    Bottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum AdapterInit {
    /// `W_down ~ N(0, 0.02)`, everything else zero: the adapter outputs
    /// exactly zero until trained.
    #[default]
    Standard,
    /// Every weight and bias drawn from `N(0, std)`.
    Random(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    pub activation: Activation,
    pub init: AdapterInit,
    pub kind: ExpertKind,
}

impl AdapterConfig {
    pub fn new(bottleneck: usize) -> Self {
        AdapterConfig {
            bottleneck,
            activation: Activation::default(),
            init: AdapterInit::default(),
            kind: ExpertKind::default(),
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_init(mut self, init: AdapterInit) -> Self {
        self.init = init;
        self
    }
}

/// Parameters of one adapter: `d·r + r + r·d + d`.
pub fn adapter_param_count(cfg: &AdapterConfig, d: usize) -> usize {
    let r = cfg.bottleneck;
    d * r + r + r * d + d
}

/// `W_up · σ(X · W_down + b_down) + b_up`, row-wise, without residual.
#[derive(Clone, Debug)]
pub struct BottleneckAdapter {
    pub w_down: ParamId,
    pub b_down: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
    pub d: usize,
    pub r: usize,
    pub activation: Activation,
}

impl BottleneckAdapter {
    /// Registers `{prefix}.down.weight`, `{prefix}.down.bias`,
    /// `{prefix}.up.weight` and `{prefix}.up.bias` as trainable.
    pub fn new<R: Rng>(
        registry: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        cfg: &AdapterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let r = cfg.bottleneck;
        if r == 0 || r > d {
            return Err(Error::Validation(format!("bottleneck r={r} must satisfy 1 <= r <= d={d}")));
        }
        let (down_std, rest_std) = match cfg.init {
            AdapterInit::Standard => (DOWN_INIT_STD, 0.0),
            AdapterInit::Random(s) => (s, s),
        };
        let w_down = registry.register_normal(format!("{prefix}.down.weight"), &[d, r], down_std, true, rng)?;
        let b_down = registry.register_normal(format!("{prefix}.down.bias"), &[r], rest_std, true, rng)?;
        let w_up = registry.register_normal(format!("{prefix}.up.weight"), &[r, d], rest_std, true, rng)?;
        let b_up = registry.register_normal(format!("{prefix}.up.bias"), &[d], rest_std, true, rng)?;
        Ok(BottleneckAdapter {
            w_down,
            b_down,
            w_up,
            b_up,
            d,
            r,
            activation: cfg.activation,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w_down, self.b_down, self.w_up, self.b_up]
    }

    pub fn param_count(&self) -> usize {
        2 * self.d * self.r + self.r + self.d
    }

    /// Applies the adapter to `x [rows×d]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (rows, d) = g.value(x).dims2("adapter_forward")?;
        if d != self.d {
            return Err(Error::dim("adapter_forward", g.shape(x), &[self.d, self.r]));
        }
        let prev = g.set_scope(Scope::Expert);
        g.count_expert_rows(rows);
        let (wd, bd, wu, bu) = (g.param(self.w_down), g.param(self.b_down), g.param(self.w_up), g.param(self.b_up));
        let h = g.matmul(x, wd)?;
        let h = g.add_row(h, bd)?;
        let h = self.activation.apply(g, h);
        let y = g.matmul(h, wu)?;
        let y = g.add_row(y, bu)?;
        g.set_scope(prev);
        Ok(y)
    }
}
