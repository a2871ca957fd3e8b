//! Randomized MoA layers and the case generators shared by the routing
//! tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softmoa::adapters::{AdapterConfig, AdapterInit, BottleneckAdapter};
use softmoa::moa::{BlockSite, DenseMoaLayer, RoutingTrace, SoftMoaLayer};
use softmoa::{Graph, ParamRegistry, Tensor};

use super::oracle::{self, AdapterW, Mat};

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub struct Soft {
    pub reg: ParamRegistry,
    pub layer: SoftMoaLayer,
}

pub fn soft_layer(seed: u64, d: usize, n: usize, p: usize, r: usize) -> Soft {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = ParamRegistry::new();
    let cfg = AdapterConfig::new(r).with_init(AdapterInit::Random(0.6));
    let layer = SoftMoaLayer::new(&mut reg, "moa", d, n, p, &cfg, &mut rng).unwrap();
    reg.randomize_trainable(0.8, &mut rng).unwrap();
    Soft { reg, layer }
}

pub fn dense_layer(seed: u64, d: usize, n: usize, r: usize) -> (ParamRegistry, DenseMoaLayer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = ParamRegistry::new();
    let cfg = AdapterConfig::new(r).with_init(AdapterInit::Random(0.6));
    let layer = DenseMoaLayer::new(&mut reg, "moa", d, n, &cfg, &mut rng).unwrap();
    reg.randomize_trainable(0.8, &mut rng).unwrap();
    (reg, layer)
}

pub fn soft_forward(s: &Soft, x: &Mat) -> (Mat, RoutingTrace) {
    let mut g = Graph::with_params(&s.reg);
    let xv = g.constant(oracle::to_tensor(x));
    let mut trace = RoutingTrace::new(0, BlockSite::Attention);
    let y = s.layer.forward(&mut g, xv, Some(&mut trace)).unwrap();
    (oracle::mat(g.value(y)), trace)
}

pub fn dense_forward(reg: &ParamRegistry, layer: &DenseMoaLayer, x: &Mat) -> Mat {
    let mut g = Graph::with_params(reg);
    let xv = g.constant(oracle::to_tensor(x));
    let y = layer.forward(&mut g, xv, None).unwrap();
    oracle::mat(g.value(y))
}

pub fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize) {
    let l = rng.random_range(1..=6);
    let d = rng.random_range(1..=4);
    let n = rng.random_range(1..=3);
    let p = rng.random_range(1..=3);
    let r = rng.random_range(1..=d);
    (l, d, n, p, r)
}

pub fn permute_rows(x: &Mat, perm: &[usize]) -> Mat {
    perm.iter().map(|&i| x[i].clone()).collect()
}

pub fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Copies expert `perm[i]` of `src` into expert `i` of `dst`.
pub fn copy_permuted_experts(
    src: &ParamRegistry,
    src_experts: &[BottleneckAdapter],
    dst: &mut ParamRegistry,
    dst_experts: &[BottleneckAdapter],
    perm: &[usize],
) {
    for (i, &j) in perm.iter().enumerate() {
        for (a, b) in dst_experts[i].param_ids().iter().zip(src_experts[j].param_ids()) {
            let data = src.tensor(b).data().to_vec();
            dst.tensor_mut(*a).data_mut().copy_from_slice(&data);
        }
    }
}

/// Permutes column blocks of width `block`: destination block `i` is source block `perm[i]`.
pub fn permute_col_blocks(t: &Tensor, perm: &[usize], block: usize) -> Vec<f64> {
    let m = oracle::mat(t);
    m.iter()
        .flat_map(|row| perm.iter().flat_map(move |&j| row[j * block..(j + 1) * block].to_vec()))
        .collect()
}

/// Soft and dense forward passes against the formula oracles, as max
/// absolute differences.
pub fn oracle_case(rng: &mut ChaCha8Rng, case: u64) -> (f64, f64) {
    let (l, d, n, p, r) = dims(rng);
    let x = random_mat(rng, l, d, 2.0);

    let s = soft_layer(case, d, n, p, r);
    let experts: Vec<AdapterW> = s.layer.experts.iter().map(|e| AdapterW::read(&s.reg, e)).collect();
    let phi = oracle::mat(s.reg.tensor(s.layer.phi));
    let (got, _) = soft_forward(&s, &x);
    let soft = oracle::max_diff(&got, &oracle::soft_moa(&x, &experts, &phi, p));

    let (reg, dense) = dense_layer(case, d, n, r);
    let experts: Vec<AdapterW> = dense.experts.iter().map(|e| AdapterW::read(&reg, e)).collect();
    let router = oracle::mat(reg.tensor(dense.router));
    let got = dense_forward(&reg, &dense, &x);
    (soft, oracle::max_diff(&got, &oracle::dense_moa(&x, &experts, &router)))
}

/// `f(Px) − P f(x)` for a random token permutation `P`.
pub fn token_permutation_case(rng: &mut ChaCha8Rng, case: u64) -> (f64, f64) {
    let (l, d, n, p, r) = dims(rng);
    let x = random_mat(rng, l, d, 2.0);
    let perm = random_perm(rng, l);
    let px = permute_rows(&x, &perm);

    let s = soft_layer(case, d, n, p, r);
    let (y, _) = soft_forward(&s, &x);
    let (py, _) = soft_forward(&s, &px);
    let soft = oracle::max_diff(&py, &permute_rows(&y, &perm));

    let (reg, dense) = dense_layer(case, d, n, r);
    let y = dense_forward(&reg, &dense, &x);
    let py = dense_forward(&reg, &dense, &px);
    (soft, oracle::max_diff(&py, &permute_rows(&y, &perm)))
}

/// Output change when experts and their routing columns are relabelled.
pub fn expert_permutation_case(rng: &mut ChaCha8Rng, case: u64) -> (f64, f64) {
    let (l, d, n, p, r) = dims(rng);
    let x = random_mat(rng, l, d, 2.0);
    let perm = random_perm(rng, n);

    let a = soft_layer(case, d, n, p, r);
    let mut b = soft_layer(case + 10_000, d, n, p, r);
    copy_permuted_experts(&a.reg, &a.layer.experts, &mut b.reg, &b.layer.experts, &perm);
    let phi = permute_col_blocks(a.reg.tensor(a.layer.phi), &perm, p);
    b.reg.tensor_mut(b.layer.phi).data_mut().copy_from_slice(&phi);
    let soft = oracle::max_diff(&soft_forward(&a, &x).0, &soft_forward(&b, &x).0);

    let (ra, da) = dense_layer(case, d, n, r);
    let (mut rb, db) = dense_layer(case + 10_000, d, n, r);
    copy_permuted_experts(&ra, &da.experts, &mut rb, &db.experts, &perm);
    let w = permute_col_blocks(ra.tensor(da.router), &perm, 1);
    rb.tensor_mut(db.router).data_mut().copy_from_slice(&w);
    (soft, oracle::max_diff(&dense_forward(&ra, &da, &x), &dense_forward(&rb, &db, &x)))
}
