//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamRegistry;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Lower bound on the denominator of the relative error, so tensors whose
/// true gradient is exactly zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_abs_err: f64,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|, REL_FLOOR)`.
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

fn eval_loss<F>(registry: &ParamRegistry, loss_fn: &F, name: &str) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let mut g = Graph::with_params(registry);
    let l = loss_fn(&mut g)?;
    let v = g.value(l).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric {
            name: name.to_string(),
            detail: format!("loss evaluated to {v}"),
        });
    }
    Ok(v)
}

/// Compares the analytic gradient of every trainable parameter against
/// central differences with step `h`. Frozen parameters are not reported.
///
/// `loss_fn` must build the same scalar loss on every call; parameter
/// values are restored exactly afterwards.
pub fn gradcheck<F>(registry: &mut ParamRegistry, loss_fn: F, h: f64, tolerance: f64) -> Result<GradcheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let analytic: Vec<(crate::ParamId, Vec<f64>)> = {
        let mut g = Graph::with_params(registry);
        let l = loss_fn(&mut g)?;
        let v = g.value(l).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric {
                name: "<loss>".into(),
                detail: format!("loss evaluated to {v}"),
            });
        }
        let grads = g.backward(l)?;
        registry
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let numel = registry.tensor(id).numel();
                let grad = grads
                    .params()
                    .find(|(pid, _)| *pid == id)
                    .map(|(_, gr)| gr.to_vec())
                    .unwrap_or_else(|| vec![0.0; numel]);
                (id, grad)
            })
            .collect()
    };

    let mut params = Vec::with_capacity(analytic.len());
    for (id, grad) in analytic {
        let name = registry.get(id).name.clone();
        let numel = grad.len();
        let mut numeric = vec![0.0; numel];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = registry.tensor(id).data()[i];
            registry.tensor_mut(id).data_mut()[i] = orig + h;
            let up = eval_loss(registry, &loss_fn, &name);
            registry.tensor_mut(id).data_mut()[i] = orig - h;
            let down = eval_loss(registry, &loss_fn, &name);
            registry.tensor_mut(id).data_mut()[i] = orig;
            *slot = (up? - down?) / (2.0 * h);
        }
        let max_abs_err = grad.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = grad
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(REL_FLOOR, f64::max);
        params.push(ParamCheck {
            name,
            numel,
            max_abs_err,
            max_rel_err: max_abs_err / scale,
        });
    }
    Ok(GradcheckReport { tolerance, params })
}
