//! AdamW with a per-epoch cosine-annealed learning rate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled weight decay Adam. Moment buffers are keyed by parameter name so
/// the state can be stored next to the parameters in a checkpoint.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first_moment: ParamStore::new(),
            second_moment: ParamStore::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// `grads` keys are looked up in `params` after adding `prefix`.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        prefix: &str,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let Some(name) = name.strip_prefix(prefix) else {
                continue;
            };
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let shape = p.shape().to_vec();
            if !self.first_moment.contains(name) {
                self.first_moment.insert(name, Tensor::zeros(shape.clone()));
                self.second_moment.insert(name, Tensor::zeros(shape));
            }
            let m = self.first_moment.get_mut(name).unwrap().data_mut();
            let v = self.second_moment.get_mut(name).unwrap().data_mut();
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *pi -= lr * weight_decay * *pi;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Learning rate for `epoch` (0-based) of `total` under cosine annealing from
/// `base` to zero.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * epoch as f64 / total as f64).cos())
}
