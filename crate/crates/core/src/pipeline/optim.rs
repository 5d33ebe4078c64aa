use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::Result;
use crate::nn::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

use super::config::OptimizerConfig;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay,
/// one learning rate per parameter group.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: OptimizerConfig,
    /// Velocity buffers by parameter name, created on first update.
    pub velocity: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, velocity: IndexMap::new() }
    }

    /// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v` for every parameter with a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &HashMap<String, Tensor<T>>) -> Result<()> {
        let mu = lit::<T>(self.config.momentum);
        let wd = lit::<T>(self.config.weight_decay);
        // store order keeps the update sequence independent of hash-map iteration
        for (name, param) in store.iter_mut() {
            if !param.trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            param.value.check_same(g)?;
            let lr = lit::<T>(self.config.lr.get(param.group));
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for ((p, &gi), vi) in param.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi + wd * *p;
                *p -= lr * *vi;
            }
        }
        Ok(())
    }
}
