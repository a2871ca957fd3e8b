//! Brute-force reference implementations on nested `Vec`s.
//!
//! Nothing here touches the autodiff graph: every formula is written out
//! with explicit loops so the library can be checked against it.
#![allow(dead_code)]

use softmoa::adapters::{Activation, BottleneckAdapter};
use softmoa::{ParamRegistry, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| (0..c).map(|j| t.data()[i * c + j]).collect()).collect()
}

pub fn vector(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    let rows: Vec<&[f64]> = m.iter().map(|r| r.as_slice()).collect();
    Tensor::from_rows(&rows)
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter().map(|r| softmax(r)).collect()
}

pub fn softmax_cols(a: &Mat) -> Mat {
    transpose(&softmax_rows(&transpose(a)))
}

/// Two-pass mean and variance, then affine.
pub fn layernorm(a: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, x)| (x - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

#[derive(Clone, Debug)]
pub struct AdapterW {
    pub wd: Mat,
    pub bd: Vec<f64>,
    pub wu: Mat,
    pub bu: Vec<f64>,
    pub relu: bool,
}

impl AdapterW {
    pub fn read(reg: &ParamRegistry, a: &BottleneckAdapter) -> Self {
        AdapterW {
            wd: mat(reg.tensor(a.w_down)),
            bd: vector(reg.tensor(a.b_down)),
            wu: mat(reg.tensor(a.w_up)),
            bu: vector(reg.tensor(a.b_up)),
            relu: a.activation == Activation::Relu,
        }
    }

    /// One row through down-projection, activation, up-projection.
    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        let r = self.bd.len();
        let d = self.bu.len();
        let mut h = vec![0.0; r];
        for k in 0..r {
            let mut s = self.bd[k];
            for c in 0..x.len() {
                s += x[c] * self.wd[c][k];
            }
            h[k] = if self.relu { s.max(0.0) } else { gelu(s) };
        }
        let mut y = vec![0.0; d];
        for c in 0..d {
            let mut s = self.bu[c];
            for k in 0..r {
                s += h[k] * self.wu[k][c];
            }
            y[c] = s;
        }
        y
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        x.iter().map(|r| self.apply_row(r)).collect()
    }
}

/// `y[t] = Σᵢ softmax(x[t]·W)ᵢ · Eᵢ(x[t])`.
pub fn dense_moa(x: &Mat, experts: &[AdapterW], router: &Mat) -> Mat {
    let d = x[0].len();
    x.iter()
        .map(|row| {
            let logits: Vec<f64> = (0..experts.len())
                .map(|i| (0..d).map(|c| row[c] * router[c][i]).sum())
                .collect();
            let gates = softmax(&logits);
            let mut y = vec![0.0; d];
            for (i, e) in experts.iter().enumerate() {
                let out = e.apply_row(row);
                for c in 0..d {
                    y[c] += gates[i] * out[c];
                }
            }
            y
        })
        .collect()
}

/// Dispatch `D`, combine `C` for slot logits `x·Φ`, written element by element.
pub fn soft_weights(x: &Mat, phi: &Mat) -> (Mat, Mat) {
    let (l, d, s) = (x.len(), x[0].len(), phi[0].len());
    let mut logits = vec![vec![0.0; s]; l];
    for t in 0..l {
        for j in 0..s {
            logits[t][j] = (0..d).map(|c| x[t][c] * phi[c][j]).sum();
        }
    }
    let mut dispatch = vec![vec![0.0; s]; l];
    let mut combine = vec![vec![0.0; s]; l];
    for j in 0..s {
        let z: f64 = (0..l).map(|t| logits[t][j].exp()).sum();
        for t in 0..l {
            dispatch[t][j] = logits[t][j].exp() / z;
        }
    }
    for t in 0..l {
        let z: f64 = (0..s).map(|j| logits[t][j].exp()).sum();
        for j in 0..s {
            combine[t][j] = logits[t][j].exp() / z;
        }
    }
    (dispatch, combine)
}

/// `x̃ⱼ = Σₜ D[t,j]·x[t]`, `ỹⱼ = E_{⌊j/p⌋}(x̃ⱼ)`, `y[t] = Σⱼ C[t,j]·ỹⱼ`.
pub fn soft_moa(x: &Mat, experts: &[AdapterW], phi: &Mat, p: usize) -> Mat {
    let (l, d, s) = (x.len(), x[0].len(), phi[0].len());
    let (dispatch, combine) = soft_weights(x, phi);
    let mut slot_out = Vec::with_capacity(s);
    for j in 0..s {
        let mut slot = vec![0.0; d];
        for t in 0..l {
            for c in 0..d {
                slot[c] += dispatch[t][j] * x[t][c];
            }
        }
        slot_out.push(experts[j / p].apply_row(&slot));
    }
    (0..l)
        .map(|t| {
            let mut y = vec![0.0; d];
            for j in 0..s {
                for c in 0..d {
                    y[c] += combine[t][j] * slot_out[j][c];
                }
            }
            y
        })
        .collect()
}

pub struct Linear {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn read(reg: &ParamRegistry, l: &softmoa::encoder::Linear) -> Self {
        Linear {
            w: mat(reg.tensor(l.weight)),
            b: vector(reg.tensor(l.bias)),
        }
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        add_bias(&matmul(x, &self.w), &self.b)
    }
}

/// Multi-head self-attention with per-head scaled dot products.
pub fn mhsa(x: &Mat, q: &Linear, k: &Linear, v: &Linear, o: &Linear, heads: usize) -> Mat {
    let (qm, km, vm) = (q.apply(x), k.apply(x), v.apply(x));
    let (l, d) = (x.len(), x[0].len());
    let dh = d / heads;
    let mut cat = vec![vec![0.0; d]; l];
    for h in 0..heads {
        for t in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|u| (0..dh).map(|c| qm[t][h * dh + c] * km[u][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for c in 0..dh {
                cat[t][h * dh + c] = (0..l).map(|u| a[u] * vm[u][h * dh + c]).sum();
            }
        }
    }
    o.apply(&cat)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max|a−n| / max(max|a|, max|n|, floor)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let num = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let den = analytic.iter().chain(numeric).map(|v| v.abs()).fold(floor, f64::max);
    num / den
}
