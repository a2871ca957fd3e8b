//! Mixtures of adapters.
//!
//! [`DenseMoaLayer`] runs every expert on every token and mixes them with a
//! per-token softmax router. [`SoftMoaLayer`] first mixes the `L` tokens into
//! `N·p` slots with column-softmax dispatch weights, runs expert `⌊j/p⌋` on
//! slot `j` only, and mixes the slot outputs back into `L` tokens with
//! row-softmax combine weights. Expert work in the soft layer is therefore
//! `N·p` rows regardless of sequence length.

use rand::Rng;

use crate::adapters::{AdapterConfig, BottleneckAdapter};
use crate::error::{Error, Result};
use crate::graph::{Graph, Scope, Var};
use crate::params::{ParamId, ParamRegistry};
use crate::tensor::Tensor;

/// Standard deviation of router weights and slot parameters at init.
pub const ROUTING_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoaMode {
    Dense,
    Soft,
}

/// Where a PETL block sits inside an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockSite {
    Attention,
    FeedForward,
}

impl std::fmt::Display for BlockSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockSite::Attention => f.write_str("attn"),
            BlockSite::FeedForward => f.write_str("ffn"),
        }
    }
}

/// Routing matrices captured from one block during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    pub layer: usize,
    pub site: BlockSite,
    /// Soft-MoA dispatch weights, `L×(N·p)`.
    pub dispatch: Option<Tensor>,
    /// Soft-MoA combine weights, `L×(N·p)`.
    pub combine: Option<Tensor>,
    /// Dense-MoA gates, `L×N`.
    pub gates: Option<Tensor>,
}

impl RoutingTrace {
    pub fn new(layer: usize, site: BlockSite) -> Self {
        RoutingTrace {
            layer,
            site,
            dispatch: None,
            combine: None,
            gates: None,
        }
    }
}

fn check_width(g: &Graph<'_>, op: &'static str, x: Var, w: Var) -> Result<()> {
    let (_, d) = g.value(x).dims2(op)?;
    let (dw, _) = g.value(w).dims2(op)?;
    if d != dw {
        return Err(Error::dim(op, g.shape(x), g.shape(w)));
    }
    Ok(())
}

/// `softmax(X W)` over the expert axis: `G [L×N]`, rows sum to one.
pub fn router_gates(g: &mut Graph<'_>, x: Var, w: Var) -> Result<Var> {
    check_width(g, "router_gates", x, w)?;
    let prev = g.set_scope(Scope::Router);
    let logits = g.matmul(x, w);
    g.set_scope(prev);
    g.softmax(logits?, 1)
}

/// Slot logits `X Φ`, shared by dispatch and combine weights.
pub fn slot_logits(g: &mut Graph<'_>, x: Var, phi: Var) -> Result<Var> {
    check_width(g, "slot_logits", x, phi)?;
    let prev = g.set_scope(Scope::Router);
    let logits = g.matmul(x, phi);
    g.set_scope(prev);
    logits
}

/// `D = softmax over tokens of X Φ`: each column sums to one.
pub fn dispatch_weights(g: &mut Graph<'_>, x: Var, phi: Var) -> Result<Var> {
    let logits = slot_logits(g, x, phi)?;
    g.softmax(logits, 0)
}

/// `C = softmax over slots of X Φ`: each row sums to one.
pub fn combine_weights(g: &mut Graph<'_>, x: Var, phi: Var) -> Result<Var> {
    let logits = slot_logits(g, x, phi)?;
    g.softmax(logits, 1)
}

fn build_experts<R: Rng>(
    registry: &mut ParamRegistry,
    prefix: &str,
    d: usize,
    n_experts: usize,
    cfg: &AdapterConfig,
    rng: &mut R,
) -> Result<Vec<BottleneckAdapter>> {
    if n_experts == 0 {
        return Err(Error::Validation("a mixture needs at least one expert".into()));
    }
    (0..n_experts)
        .map(|i| BottleneckAdapter::new(registry, &format!("{prefix}.experts.{i}"), d, cfg, rng))
        .collect()
}

/// Router-gated sum over all experts, evaluated on all tokens.
#[derive(Clone, Debug)]
pub struct DenseMoaLayer {
    pub experts: Vec<BottleneckAdapter>,
    /// `d×N`, no bias.
    pub router: ParamId,
    pub d: usize,
}

impl DenseMoaLayer {
    pub fn new<R: Rng>(
        registry: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        n_experts: usize,
        cfg: &AdapterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let experts = build_experts(registry, prefix, d, n_experts, cfg, rng)?;
        let router = registry.register_normal(format!("{prefix}.router"), &[d, n_experts], ROUTING_INIT_STD, true, rng)?;
        Ok(DenseMoaLayer { experts, router, d })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// `Y[t] = Σᵢ G[t,i] · Eᵢ(X)[t]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, trace: Option<&mut RoutingTrace>) -> Result<Var> {
        let w = g.param(self.router);
        let gates = router_gates(g, x, w)?;
        if let Some(t) = trace {
            t.gates = Some(g.value(gates).clone());
        }
        let mut acc: Option<Var> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let e = expert.forward(g, x)?;
            let gi = g.slice_cols(gates, i, 1)?;
            let prev = g.set_scope(Scope::Combine);
            let weighted = g.mul_col(e, gi);
            g.set_scope(prev);
            let weighted = weighted?;
            acc = Some(match acc {
                None => weighted,
                Some(a) => g.add(a, weighted)?,
            });
        }
        Ok(acc.expect("at least one expert"))
    }
}

/// Slot-based soft mixture: `X̃ = DᵀX`, `Ỹⱼ = E_{⌊j/p⌋}(X̃ⱼ)`, `Y = C Ỹ`.
#[derive(Clone, Debug)]
pub struct SoftMoaLayer {
    pub experts: Vec<BottleneckAdapter>,
    /// `d×(N·p)` slot parameters, no bias.
    pub phi: ParamId,
    pub slots_per_expert: usize,
    pub d: usize,
}

impl SoftMoaLayer {
    pub fn new<R: Rng>(
        registry: &mut ParamRegistry,
        prefix: &str,
        d: usize,
        n_experts: usize,
        slots_per_expert: usize,
        cfg: &AdapterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if slots_per_expert == 0 {
            return Err(Error::Validation("slots per expert must be at least 1".into()));
        }
        let experts = build_experts(registry, prefix, d, n_experts, cfg, rng)?;
        let phi = registry.register_normal(
            format!("{prefix}.phi"),
            &[d, n_experts * slots_per_expert],
            ROUTING_INIT_STD,
            true,
            rng,
        )?;
        Ok(SoftMoaLayer {
            experts,
            phi,
            slots_per_expert,
            d,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn n_slots(&self) -> usize {
        self.experts.len() * self.slots_per_expert
    }

    /// Owner of slot `j`.
    pub fn slot_owner(&self, j: usize) -> usize {
        j / self.slots_per_expert
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, trace: Option<&mut RoutingTrace>) -> Result<Var> {
        let phi = g.param(self.phi);
        let logits = slot_logits(g, x, phi)?;
        let dispatch = g.softmax(logits, 0)?;
        let combine = g.softmax(logits, 1)?;
        if let Some(t) = trace {
            t.dispatch = Some(g.value(dispatch).clone());
            t.combine = Some(g.value(combine).clone());
        }

        let prev = g.set_scope(Scope::Dispatch);
        let dt = g.transpose(dispatch);
        let slots = dt.and_then(|dt| g.matmul(dt, x));
        g.set_scope(prev);
        let slots = slots?;

        let p = self.slots_per_expert;
        let mut outs = Vec::with_capacity(self.experts.len());
        for (i, expert) in self.experts.iter().enumerate() {
            let own = g.slice_rows(slots, i * p, p)?;
            outs.push(expert.forward(g, own)?);
        }
        let slot_out = g.concat_rows(&outs)?;

        let prev = g.set_scope(Scope::Combine);
        let y = g.matmul(combine, slot_out);
        g.set_scope(prev);
        y
    }
}

/// Average combine weight each expert receives over the output tokens:
/// `contribution[i] = mean_t Σ_{j: ⌊j/p⌋ = i} C[t, j]`.
pub fn expert_contribution(trace: &RoutingTrace, slots_per_expert: usize) -> Result<Vec<f64>> {
    let c = trace
        .combine
        .as_ref()
        .ok_or_else(|| Error::Contract("routing trace holds no combine weights".into()))?;
    let (l, slots) = c.dims2("expert_contribution")?;
    if slots_per_expert == 0 || slots % slots_per_expert != 0 {
        return Err(Error::Contract(format!(
            "{slots} slots cannot be split into blocks of {slots_per_expert}"
        )));
    }
    let n = slots / slots_per_expert;
    let mut out = vec![0.0; n];
    for t in 0..l {
        for (j, &v) in c.row(t).iter().enumerate() {
            out[j / slots_per_expert] += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= l as f64);
    Ok(out)
}

/// Expert-by-class contribution matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassContribution {
    /// `values[i][k]`: mean contribution of expert `i` over samples of class
    /// `k`, `None` when class `k` has no samples.
    pub values: Vec<Vec<Option<f64>>>,
    pub samples_per_class: Vec<usize>,
}

impl ClassContribution {
    pub fn n_experts(&self) -> usize {
        self.values.len()
    }

    pub fn n_classes(&self) -> usize {
        self.samples_per_class.len()
    }

    pub fn absent_classes(&self) -> Vec<usize> {
        (0..self.n_classes()).filter(|&k| self.samples_per_class[k] == 0).collect()
    }
}

/// Per-class average of per-sample expert contributions. `traces[s]` is the
/// designated block's trace for sample `s`.
pub fn per_class_contribution(
    traces: &[RoutingTrace],
    labels: &[usize],
    slots_per_expert: usize,
    n_classes: usize,
) -> Result<ClassContribution> {
    if traces.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} traces but {} labels",
            traces.len(),
            labels.len()
        )));
    }
    let first = traces
        .first()
        .ok_or_else(|| Error::Contract("no traces to aggregate".into()))?;
    let n = expert_contribution(first, slots_per_expert)?.len();
    let mut sums = vec![vec![0.0; n_classes]; n];
    let mut counts = vec![0usize; n_classes];
    for (trace, &label) in traces.iter().zip(labels) {
        if label >= n_classes {
            return Err(Error::Validation(format!("label {label} out of range for {n_classes} classes")));
        }
        let contrib = expert_contribution(trace, slots_per_expert)?;
        if contrib.len() != n {
            return Err(Error::Contract("traces disagree on expert count".into()));
        }
        for (i, c) in contrib.into_iter().enumerate() {
            sums[i][label] += c;
        }
        counts[label] += 1;
    }
    let values = sums
        .into_iter()
        .map(|row| {
            row.into_iter()
                .zip(&counts)
                .map(|(s, &c)| (c > 0).then(|| s / c as f64))
                .collect()
        })
        .collect();
    Ok(ClassContribution {
        values,
        samples_per_class: counts,
    })
}

/// Trainable parameters of `layers` MoA blocks (classifier head excluded).
///
/// Dense: `layers·(N·(2dr + r + d) + d·N)`; soft: `layers·(N·(2dr + r + d) + d·N·p)`.
pub fn moa_param_count(
    n_experts: usize,
    slots_per_expert: usize,
    bottleneck: usize,
    d: usize,
    layers: usize,
    mode: MoaMode,
) -> usize {
    let experts = n_experts * (2 * d * bottleneck + bottleneck + d);
    let routing = match mode {
        MoaMode::Dense => d * n_experts,
        MoaMode::Soft => d * n_experts * slots_per_expert,
    };
    layers * (experts + routing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterInit, Activation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn set(reg: &mut ParamRegistry, id: ParamId, vals: &[f64]) {
        reg.tensor_mut(id).data_mut().copy_from_slice(vals);
    }

    #[test]
    fn zero_router_gives_uniform_gates() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5], &[0.0, 1.0]]));
        let w = g.constant(Tensor::zeros(&[2, 3]));
        let gates = router_gates(&mut g, x, w).unwrap();
        assert!(g.value(gates).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let w1 = g.constant(Tensor::from_rows(&[&[0.3], &[-0.7]]));
        let gates = router_gates(&mut g, x, w1).unwrap();
        assert!(g.value(gates).data().iter().all(|&v| v == 1.0));

        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(router_gates(&mut g, x, bad).is_err());
    }

    #[test]
    fn dispatch_and_combine_edge_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5], &[0.0, 1.0]]));
        let phi0 = g.constant(Tensor::zeros(&[2, 4]));
        let d = dispatch_weights(&mut g, x, phi0).unwrap();
        assert!(g.value(d).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let c = combine_weights(&mut g, x, phi0).unwrap();
        assert!(g.value(c).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let one_slot = g.constant(Tensor::from_rows(&[&[0.4], &[1.1]]));
        let c = combine_weights(&mut g, x, one_slot).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 1.0));

        let single = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let phi = g.constant(Tensor::from_rows(&[&[0.4, -1.0], &[1.1, 2.0]]));
        let d = dispatch_weights(&mut g, single, phi).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 1.0));
    }

    /// Expert whose output equals its input: ReLU with identity projections
    /// on non-negative inputs.
    fn identity_expert(reg: &mut ParamRegistry, e: &BottleneckAdapter) {
        set(reg, e.w_down, &[1.0]);
        set(reg, e.w_up, &[1.0]);
    }

    #[test]
    fn soft_single_slot_averages_tokens() {
        let mut reg = ParamRegistry::new();
        let cfg = AdapterConfig::new(1).with_activation(Activation::Relu);
        let layer = SoftMoaLayer::new(&mut reg, "s", 1, 1, 1, &cfg, &mut rng()).unwrap();
        identity_expert(&mut reg, &layer.experts[0]);
        set(&mut reg, layer.phi, &[0.0]);
        let mut g = Graph::with_params(&reg);
        let x = g.constant(Tensor::from_rows(&[&[1.0], &[3.0]]));
        let mut trace = RoutingTrace::new(0, BlockSite::Attention);
        let y = layer.forward(&mut g, x, Some(&mut trace)).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 2.0]);
        assert_eq!(trace.dispatch.as_ref().unwrap().data(), &[0.5, 0.5]);
        assert_eq!(expert_contribution(&trace, 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn soft_single_token_is_plain_expert() {
        let mut reg = ParamRegistry::new();
        let cfg = AdapterConfig::new(2).with_init(AdapterInit::Random(0.5));
        let layer = SoftMoaLayer::new(&mut reg, "s", 3, 1, 1, &cfg, &mut rng()).unwrap();
        let mut g = Graph::with_params(&reg);
        let x = g.constant(Tensor::from_rows(&[&[0.2, -1.0, 0.7]]));
        let y = layer.forward(&mut g, x, None).unwrap();
        let e = layer.experts[0].forward(&mut g, x).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(e)) < 1e-15);
    }

    #[test]
    fn dense_single_expert_and_linear_pair() {
        let mut reg = ParamRegistry::new();
        let cfg = AdapterConfig::new(1).with_activation(Activation::Relu);
        let layer = DenseMoaLayer::new(&mut reg, "d", 1, 2, &cfg, &mut rng()).unwrap();
        identity_expert(&mut reg, &layer.experts[0]);
        set(&mut reg, layer.experts[1].w_down, &[1.0]);
        set(&mut reg, layer.experts[1].w_up, &[2.0]);
        set(&mut reg, layer.router, &[0.0, 0.0]);
        let mut g = Graph::with_params(&reg);
        let x = g.constant(Tensor::from_rows(&[&[2.0]]));
        let mut trace = RoutingTrace::new(0, BlockSite::Attention);
        let y = layer.forward(&mut g, x, Some(&mut trace)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
        assert_eq!(trace.gates.unwrap().data(), &[0.5, 0.5]);

        let mut reg = ParamRegistry::new();
        let cfg = AdapterConfig::new(2).with_init(AdapterInit::Random(0.5));
        let layer = DenseMoaLayer::new(&mut reg, "d", 3, 1, &cfg, &mut rng()).unwrap();
        let mut g = Graph::with_params(&reg);
        let x = g.constant(Tensor::from_rows(&[&[0.2, -1.0, 0.7], &[1.0, 0.0, -0.3]]));
        let y = layer.forward(&mut g, x, None).unwrap();
        let e = layer.experts[0].forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(e).data());
    }

    #[test]
    fn dense_identical_experts_ignore_router() {
        let mut reg = ParamRegistry::new();
        let cfg = AdapterConfig::new(2).with_init(AdapterInit::Random(0.5));
        let layer = DenseMoaLayer::new(&mut reg, "d", 3, 3, &cfg, &mut rng()).unwrap();
        let src: Vec<Vec<f64>> = layer.experts[0]
            .param_ids()
            .iter()
            .map(|&id| reg.tensor(id).data().to_vec())
            .collect();
        for e in &layer.experts[1..] {
            for (id, vals) in e.param_ids().iter().zip(&src) {
                set(&mut reg, *id, vals);
            }
        }
        let x = Tensor::from_rows(&[&[0.2, -1.0, 0.7], &[1.0, 0.0, -0.3]]);
        let run = |reg: &ParamRegistry| {
            let mut g = Graph::with_params(reg);
            let xv = g.constant(x.clone());
            let y = layer.forward(&mut g, xv, None).unwrap();
            let e = layer.experts[0].forward(&mut g, xv).unwrap();
            (g.value(y).clone(), g.value(e).clone())
        };
        let (y1, e) = run(&reg);
        assert!(y1.max_abs_diff(&e) < 1e-12);
        set(&mut reg, layer.router, &[5.0, -3.0, 1.0, 0.1, 2.0, -2.0, 0.0, 4.0, -1.0]);
        let (y2, _) = run(&reg);
        assert!(y2.max_abs_diff(&e) < 1e-12);
    }

    #[test]
    fn contribution_edge_cases() {
        let mut t = RoutingTrace::new(0, BlockSite::Attention);
        assert!(expert_contribution(&t, 1).is_err());
        t.combine = Some(Tensor::full(&[3, 6], 1.0 / 6.0));
        let c = expert_contribution(&t, 2).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(expert_contribution(&t, 4).is_err());
    }

    #[test]
    fn per_class_uniform_and_absent() {
        let mut t = RoutingTrace::new(0, BlockSite::Attention);
        t.combine = Some(Tensor::full(&[2, 4], 0.25));
        let m = per_class_contribution(&[t.clone(), t.clone()], &[0, 0], 1, 2).unwrap();
        assert_eq!(m.values.len(), 4);
        for row in &m.values {
            assert_eq!(row[0], Some(0.25));
            assert_eq!(row[1], None);
        }
        assert_eq!(m.absent_classes(), vec![1]);

        let m = per_class_contribution(&[t.clone(), t], &[0, 1], 1, 2).unwrap();
        for row in &m.values {
            assert_eq!(row[0], row[1]);
        }
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(moa_param_count(14, 1, 1, 768, 12, MoaMode::Soft), 516_264);
        assert_eq!(moa_param_count(14, 1, 1, 768, 12, MoaMode::Dense), 516_264);
        assert_eq!(moa_param_count(1, 1, 1, 1, 1, MoaMode::Soft), 5);
    }

    #[test]
    fn param_count_matches_registry() {
        for (n, p, r, d) in [(1, 1, 1, 1), (2, 3, 2, 5), (14, 1, 1, 16), (3, 2, 4, 8)] {
            let cfg = AdapterConfig::new(r);
            let mut reg = ParamRegistry::new();
            SoftMoaLayer::new(&mut reg, "s", d, n, p, &cfg, &mut rng()).unwrap();
            assert_eq!(reg.count(true), moa_param_count(n, p, r, d, 1, MoaMode::Soft));
            let mut reg = ParamRegistry::new();
            DenseMoaLayer::new(&mut reg, "d", d, n, &cfg, &mut rng()).unwrap();
            assert_eq!(reg.count(true), moa_param_count(n, p, r, d, 1, MoaMode::Dense));
        }
    }

    #[test]
    fn soft_expert_rows_independent_of_length() {
        let mut reg = ParamRegistry::new();
        let layer = SoftMoaLayer::new(&mut reg, "s", 4, 3, 2, &AdapterConfig::new(1), &mut rng()).unwrap();
        for l in [1, 5, 40] {
            let mut g = Graph::with_params(&reg);
            let x = g.constant(Tensor::full(&[l, 4], 0.3));
            layer.forward(&mut g, x, None).unwrap();
            assert_eq!(g.counters().expert_rows, 6);
        }
    }
}
