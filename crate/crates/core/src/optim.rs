//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers keyed like the parameters they track. Each entry keeps
/// its own step count so bias correction stays right when entries are
/// frozen for part of training.
#[derive(Debug, Clone)]
pub struct AdamW {
    first: ParameterSet,
    second: ParameterSet,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: vec![0; params.len()],
        }
    }

    pub fn reset(&mut self) {
        self.first.fill(0.0);
        self.second.fill(0.0);
        self.steps.fill(0);
    }

    pub fn is_zeroed(&self) -> bool {
        self.steps.iter().all(|&s| s == 0)
            && self.first.iter().chain(self.second.iter()).all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn moments(&self) -> (&ParameterSet, &ParameterSet) {
        (&self.first, &self.second)
    }

    /// Updates every entry for which `include(name)` holds.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &ParameterSet,
        cfg: &AdamWConfig,
        include: impl Fn(&str) -> bool,
    ) -> Result<()> {
        params.check_compatible(grads)?;
        if self.steps.len() != params.len() {
            return Err(Error::Incompatible("optimizer state does not match parameters".into()));
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        for idx in 0..params.len() {
            if !include(params.name(idx)) {
                continue;
            }
            self.steps[idx] += 1;
            let t = self.steps[idx] as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let g = grads.tensor(idx).data();
            let m = self.first.tensor_mut(idx).data_mut();
            let v = self.second.tensor_mut(idx).data_mut();
            let p = params.tensor_mut(idx).data_mut();
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
                p[j] -= cfg.lr * (update + cfg.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}
