//! AdamW with cosine annealing over a frozen-backbone model.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Spectrogram};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{ParamId, ParamRegistry};

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
///
/// Steps past `total` clamp to `lr_min` (warned once per process). With
/// `total = 0` there is nothing to anneal and `lr_max` is returned.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    if step > total {
        if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("cosine_lr: step {step} beyond total {total}, clamping to lr_min");
        }
        return lr_min;
    }
    let t = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    id: ParamId,
    decay: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment buffers for the trainable parameters of one registry.
///
/// Weight decay is decoupled and applies to trainable tensors of rank ≥ 2
/// (projection matrices, routers, slot parameters); biases are exempt.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl OptimState {
    pub fn new(registry: &ParamRegistry, config: AdamWConfig) -> Self {
        let moments = registry
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(id, p)| Moments {
                id,
                decay: p.tensor.shape().len() >= 2,
                m: vec![0.0; p.tensor.numel()],
                v: vec![0.0; p.tensor.numel()],
            })
            .collect();
        OptimState {
            config,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.iter().map(|m| m.id)
    }

    /// One AdamW update from the registry's `grad` buffers. A missing grad
    /// counts as zero. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, registry: &mut ParamRegistry, lr: f64) -> Result<()> {
        for mo in &self.moments {
            let p = registry.get(mo.id);
            if let Some(g) = &p.tensor.grad {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        name: p.name.clone(),
                        detail: format!("gradient entry {bad}"),
                    });
                }
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for mo in &mut self.moments {
            let t = registry.tensor_mut(mo.id);
            let grad = t.grad.take();
            let shrink = if mo.decay { 1.0 - lr * weight_decay } else { 1.0 };
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g;
                mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g * g;
                let m_hat = mo.m[i] / bc1;
                let v_hat = mo.v[i] / bc2;
                data[i] = data[i] * shrink - lr * m_hat / (v_hat.sqrt() + eps);
            }
            t.grad = grad;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    /// 0 disables evaluation.
    pub eval_every: usize,
    /// Stop after this many optimizer steps instead of `epochs` full passes.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr_max: 5e-3,
            lr_min: 0.0,
            weight_decay: 0.1,
            seed: 0,
            eval_every: 1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        if self.max_steps.is_none() && self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Validation(format!(
                "need 0 <= lr_min <= lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Validation(format!("weight decay {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.max_steps.unwrap_or(self.epochs * self.steps_per_epoch(n))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub step_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    /// Optimizer steps completed when evaluated.
    pub step: usize,
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub frozen_hash: String,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

/// Forward, backward and one optimizer update on a single batch. Returns the
/// batch loss before the update.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimState,
    batch: &[&Spectrogram],
    labels: &[usize],
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::with_params(&model.params);
        let l = model.loss(&mut g, batch, labels)?;
        let loss = g.value(l).data()[0];
        if !loss.is_finite() {
            return Err(Error::Numeric {
                name: "<loss>".into(),
                detail: format!("loss evaluated to {loss}"),
            });
        }
        (loss, g.backward(l)?)
    };
    model.params.zero_grads();
    grads.accumulate_into(&mut model.params);
    opt.step(&mut model.params, lr)?;
    Ok(loss)
}

/// Predicted classes for every sample of `data`, evaluated in chunks.
pub fn predict(model: &Model, data: &Dataset, chunk: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for specs in data.spectrograms.chunks(chunk.max(1)) {
        let batch: Vec<&Spectrogram> = specs.iter().collect();
        let logits = model.logits(&batch)?;
        for r in 0..batch.len() {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            out.push(best);
        }
    }
    Ok(out)
}

pub fn accuracy(model: &Model, data: &Dataset, chunk: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    let pred = predict(model, data, chunk)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Trains the trainable partition of `model` on `train`.
///
/// Batches follow a seeded permutation per epoch. The frozen payload hash is
/// checked before and after; a mismatch is a contract error.
pub fn train(model: &mut Model, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    if train.n_classes > model.config.n_classes {
        return Err(Error::Validation(format!(
            "dataset has {} classes, model head has {}",
            train.n_classes, model.config.n_classes
        )));
    }
    let frozen_hash = model.params.frozen_hash();
    let mut opt = OptimState::new(
        &model.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let total = cfg.total_steps(train.len());
    let per_epoch = cfg.steps_per_epoch(train.len());
    let mut log = TrainLog {
        frozen_hash: frozen_hash.clone(),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            let batch: Vec<&Spectrogram> = idx.iter().map(|&i| &train.spectrograms[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min);
            let t0 = Instant::now();
            let loss = train_step(model, &mut opt, &batch, &labels, lr)?;
            log.steps.push(StepRecord {
                step,
                epoch,
                loss,
                lr,
                step_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
        epoch += 1;
        let last = step == total;
        if cfg.eval_every > 0 && (last || epoch % cfg.eval_every == 0) {
            let rec = EvalRecord {
                step,
                epoch,
                train_accuracy: accuracy(model, train, cfg.batch_size)?,
                test_accuracy: test.map(|t| accuracy(model, t, cfg.batch_size)).transpose()?,
            };
            log::info!(
                "epoch {epoch}/{} step {step}: train acc {:.4} test acc {:?}",
                total.div_ceil(per_epoch),
                rec.train_accuracy,
                rec.test_accuracy
            );
            log.evals.push(rec);
        }
    }
    if model.params.frozen_hash() != frozen_hash {
        return Err(Error::Contract("frozen parameters changed during training".into()));
    }
    Ok(log)
}
