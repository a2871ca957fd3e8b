//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes
//! are appended in evaluation order, so the node vector is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters are not copied into the graph: a parameter leaf refers back
//! to the [`ParamRegistry`] the graph borrows. Whether a parameter leaf needs
//! a gradient comes from its trainable flag, which lets frozen weights skip
//! their weight-gradient products entirely.
//!
//! The graph also counts forward multiply-adds per [`Scope`], which the FLOP
//! model is checked against.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRegistry};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Attribution bucket for multiply-add counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    Backbone,
    Expert,
    Router,
    Dispatch,
    Combine,
    Head,
}

impl Scope {
    pub const ALL: [Scope; 6] = [
        Scope::Backbone,
        Scope::Expert,
        Scope::Router,
        Scope::Dispatch,
        Scope::Combine,
        Scope::Head,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Forward-pass instrumentation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    macs: [u64; 6],
    /// Rows pushed through an expert adapter.
    pub expert_rows: u64,
}

impl OpCounters {
    pub fn macs(&self, scope: Scope) -> u64 {
        self.macs[scope.index()]
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.iter().sum()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    /// Keeps `tanh` of the inner polynomial for the backward pass.
    Gelu { x: Var, tanh: Vec<f64> },
    Relu(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    MeanRows(Var),
    Sum(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Value,
    requires_grad: bool,
    op: Op,
}

/// Epsilon used by [`Graph::layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximation GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    // Through exp: about twice as fast as f64::tanh here, absolute error ~1e-16.
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

/// Derivative of the tanh-approximation GELU given `t = gelu_tanh(x)`.
fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Strided `c (+)= op(a) · op(b)` where `a` is stored `m×k` (or `k×m` when
/// `ta`) and `b` is stored `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

fn add_into_owned(acc: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it required one.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].as_deref()
    }

    /// Gradients for trainable parameter leaves.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, n)| self.nodes[n].as_deref().map(|g| (id, g)))
    }

    /// Adds every parameter gradient into the registry's `grad` buffers.
    pub fn accumulate_into(&self, registry: &mut ParamRegistry) {
        for (id, g) in self.params() {
            registry.accumulate_grad(id, g);
        }
    }
}

/// A recorded forward computation.
#[derive(Debug)]
pub struct Graph<'p> {
    registry: Option<&'p ParamRegistry>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    scope: Scope,
    counters: OpCounters,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters; only [`Graph::leaf`] inputs.
    pub fn new() -> Self {
        Graph {
            registry: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            scope: Scope::Backbone,
            counters: OpCounters::default(),
        }
    }

    pub fn with_params(registry: &'p ParamRegistry) -> Self {
        Graph {
            registry: Some(registry),
            ..Self::new()
        }
    }

    pub fn registry(&self) -> Option<&'p ParamRegistry> {
        self.registry
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the multiply-add attribution scope, returning the previous one.
    pub fn set_scope(&mut self, scope: Scope) -> Scope {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    pub fn count_expert_rows(&mut self, rows: usize) {
        self.counters.expert_rows += rows as u64;
    }

    fn count_macs(&mut self, macs: usize) {
        self.counters.macs[self.scope.index()] += macs as u64;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.registry.expect("param node without registry").tensor(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input leaf; gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        let mut t = tensor;
        t.grad = None;
        self.push(t, Op::Leaf, rg)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Leaf bound to a registry parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let reg = self.registry.expect("Graph::param requires Graph::with_params");
        let trainable = reg.get(id).trainable();
        self.nodes.push(Node {
            value: Value::Param(id),
            requires_grad: trainable,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.count_macs(m * k * n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), rg))
    }

    /// `a [m×n] + bias [n]`, broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("add_row")?;
        if self.value(bias).numel() != n || self.shape(bias).len() != 1 {
            return Err(Error::dim("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::AddRow(a, bias), rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(&shape, out).expect("same shape"), Op::Scale(a, c), rg)
    }

    /// `a [m×n]` with row `i` scaled by `col[i]` (`col` is `m×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("mul_col")?;
        if self.shape(col) != [m, 1] {
            return Err(Error::dim("mul_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for (row, s) in out.chunks_exact_mut(n).zip(c) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        self.count_macs(m * n);
        let rg = self.any_grad(&[a, col]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MulCol(a, col), rg))
    }

    /// Softmax along `axis`, max-shifted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        if inner == 1 {
            for (row, dst) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o = (v - max).exp();
                    sum += *o;
                }
                let inv = 1.0 / sum;
                dst.iter_mut().for_each(|o| *o *= inv);
            }
            let rg = self.any_grad(&[x]);
            return Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, rg));
        }
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|j| src[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Row-wise layer normalization of `x [L×d]` with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (l, d) = self.value(x).dims2("layernorm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layernorm", self.shape(x), self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; l * d];
        let mut rstd = vec![0.0; l];
        let mut out = vec![0.0; l * d];
        for r in 0..l {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(&[l, d], out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x).data();
        let tanh: Vec<f64> = src.iter().map(|&v| gelu_tanh(v)).collect();
        let out = src.iter().zip(&tanh).map(|(&v, t)| 0.5 * v * (1.0 + t)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        let tanh = if rg { tanh } else { Vec::new() };
        self.push(Tensor::new(&shape, out).expect("same shape"), Op::Gelu { x, tanh }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(&shape, out).expect("same shape"), Op::Relu(x), rg)
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits [B×K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Validation(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[labels[r]];
            for c in 0..k {
                probs[r * k + c] = (row[c] - lse).exp();
            }
        }
        loss /= b as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Column means of `x [m×n]` as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("mean_rows")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n];
        for row in src.chunks_exact(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[1, n], out)?, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Columns `start..start + len` of `x [m×n]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` of `x [m×n]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[len, n], out)?, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, n) = self.value(first).dims2("concat_rows")?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_rows")?;
            if pn != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires a gradient gets one, zero if the loss does
    /// not depend on it. Gradients are returned, not written into the
    /// registry; see [`Gradients::accumulate_into`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; self.value(Var(i)).numel()]);
            }
            if !node.requires_grad {
                grads[i] = None;
            }
            if let Op::Param(id) = node.op {
                params.push((id, i));
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul").unwrap();
                let n = out.shape()[1];
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut da, 0.0);
                    add_into_owned(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut db, 0.0);
                    add_into_owned(&mut grads[b.0], db);
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let (m, n) = self.value(*a).dims2("transpose").unwrap();
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    add_into_owned(&mut grads[a.0], da);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::AddRow(a, bias) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.rg(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    add_into_owned(&mut grads[bias.0], db);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    add_into_owned(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let db = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    add_into_owned(&mut grads[b.0], db);
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    add_into_owned(&mut grads[a.0], g.iter().map(|x| x * c).collect());
                }
            }
            Op::MulCol(a, col) => {
                let n = out.shape()[1];
                let c = self.value(*col).data();
                if self.rg(*a) {
                    let mut da = g.to_vec();
                    for (row, s) in da.chunks_exact_mut(n).zip(c) {
                        row.iter_mut().for_each(|x| *x *= s);
                    }
                    add_into_owned(&mut grads[a.0], da);
                }
                if self.rg(*col) {
                    let av = self.value(*a).data();
                    let dc = g
                        .chunks_exact(n)
                        .zip(av.chunks_exact(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    add_into_owned(&mut grads[col.0], dc);
                }
            }
            Op::Softmax { x, axis } => {
                if self.rg(*x) {
                    let y = out.data();
                    let (outer, n, inner) = axis_split(out.shape(), *axis);
                    let mut dx = vec![0.0; y.len()];
                    if inner == 1 {
                        for ((dr, yr), gr) in dx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                                *d = yv * (gv - dot);
                            }
                        }
                        add_into_owned(&mut grads[x.0], dx);
                        return;
                    }
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..n {
                                let p = base + j * inner;
                                dx[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                    add_into_owned(&mut grads[x.0], dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (l, d) = out.dims2("layernorm").unwrap();
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..l {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    add_into_owned(&mut grads[gamma.0], dg);
                }
                if self.rg(*beta) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks_exact(d) {
                        db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    add_into_owned(&mut grads[beta.0], db);
                }
                if self.rg(*x) {
                    let gm = self.value(*gamma).data();
                    let mut dx = vec![0.0; l * d];
                    for r in 0..l {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * gm[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = gr[c] * gm[c];
                            dx[r * d + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    add_into_owned(&mut grads[x.0], dx);
                }
            }
            Op::Gelu { x, tanh } => {
                if self.rg(*x) {
                    let dx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .zip(tanh)
                        .map(|((gv, &xv), &t)| gv * gelu_grad(xv, t))
                        .collect();
                    add_into_owned(&mut grads[x.0], dx);
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let dx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    add_into_owned(&mut grads[x.0], dx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.rg(*logits) {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        dz[r * k + y] -= scale;
                    }
                    add_into_owned(&mut grads[logits.0], dz);
                }
            }
            Op::MeanRows(x) => {
                if self.rg(*x) {
                    let (m, n) = self.value(*x).dims2("mean_rows").unwrap();
                    let inv = 1.0 / m as f64;
                    let mut dx = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        dx.extend(g.iter().map(|v| v * inv));
                    }
                    add_into_owned(&mut grads[x.0], dx);
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    add_into_owned(&mut grads[x.0], vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let (m, n) = self.value(*x).dims2("slice_cols").unwrap();
                    let w = out.shape()[1];
                    let acc = grads[x.0].get_or_insert_with(|| vec![0.0; m * n]);
                    for r in 0..m {
                        for c in 0..w {
                            acc[r * n + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.shape()[1];
                let m = out.shape()[0];
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    if self.rg(*p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&g[r * n + off..r * n + off + w]);
                        }
                        add_into_owned(&mut grads[p.0], dp);
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let numel = self.value(*x).numel();
                    let n = out.shape()[1];
                    let acc = grads[x.0].get_or_insert_with(|| vec![0.0; numel]);
                    acc[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, v)| *a += v);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.rg(*p) {
                        add_into(&mut grads[p.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
        }
    }
}
