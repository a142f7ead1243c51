//! Adam with bias correction and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The schedule ends at `lr * final_lr_fraction`.
    pub final_lr_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            final_lr_fraction: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            Error::Config(format!("optim.lr must be positive, got {}", self.lr))
        );
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            ensure!(
                (0.0..1.0).contains(&b),
                Error::Config(format!("optim.{name} must lie in [0, 1), got {b}"))
            );
        }
        ensure!(self.eps > 0.0, Error::Config("optim.eps must be positive".into()));
        ensure!(
            (0.0..=1.0).contains(&self.final_lr_fraction),
            Error::Config("optim.final_lr_fraction must lie in [0, 1]".into())
        );
        Ok(())
    }

    /// Cosine decay from `lr` at step 0 to `lr * final_lr_fraction` at `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let lo = self.lr * self.final_lr_fraction;
        if total_steps <= 1 {
            return self.lr;
        }
        let t = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
        lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with learning rate `lr`. Parameters without a gradient entry
    /// are left untouched.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        cfg: &OptimConfig,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = match (self.m.get_mut(name), self.v.get_mut(name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::Config(format!("optimizer has no state for {name}"))),
            };
            ensure!(
                g.shape() == p.shape(),
                Error::Shape(format!("gradient of {name} has shape {:?}", g.shape()))
            );
            let it = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data());
            for (((pi, mi), vi), &gi) in it {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
