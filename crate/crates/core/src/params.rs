//! Named parameter storage with a frozen/trainable partition.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad
    }
}

/// Every model parameter, in registration order.
///
/// Names are unique. A parameter is trainable iff its tensor has
/// `requires_grad` set; everything else is frozen.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(trainable),
        });
        Ok(id)
    }

    /// Registers a tensor filled from `normal(0, std)`.
    pub fn register_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Result<ParamId> {
        let mut t = Tensor::zeros(shape);
        if std > 0.0 {
            let dist = Normal::new(0.0, std).map_err(|e| Error::Validation(e.to_string()))?;
            t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        self.register(name, t, trainable)
    }

    /// Redraws every trainable parameter from `normal(0, std)`, so that no
    /// path is silenced by zero initialization.
    pub fn randomize_trainable<R: Rng>(&mut self, std: f64, rng: &mut R) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Validation(e.to_string()))?;
        for p in self.params.iter_mut().filter(|p| p.tensor.requires_grad) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let t = &mut self.params[id.0].tensor;
        t.requires_grad = trainable;
        if !trainable {
            t.grad = None;
        }
    }

    /// Number of scalars in trainable (or frozen) parameters.
    pub fn count(&self, trainable: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable() == trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn count_matching(&self, pred: impl Fn(&Param) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.tensor.numel()).sum()
    }

    /// Zeroes gradients of every trainable parameter.
    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.tensor.requires_grad) {
            p.tensor.zero_grad();
        }
    }

    /// Adds a gradient buffer into a parameter's `grad`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let t = &mut self.params[id.0].tensor;
        debug_assert_eq!(grad.len(), t.numel());
        match &mut t.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => t.grad = Some(grad.to_vec()),
        }
    }

    /// SHA-256 over names, shapes and payloads of all frozen parameters.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| !p.trainable()) {
            h.update(p.name.as_bytes());
            for &e in p.tensor.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
