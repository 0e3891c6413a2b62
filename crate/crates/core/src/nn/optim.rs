use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::Real;
use crate::error::{Error, Result};

/// Cosine annealing from `base_lr` down to `min_lr` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, min_lr: f64, total_steps: u64) -> Self {
        CosineSchedule {
            base_lr,
            min_lr,
            total_steps,
        }
    }

    /// Learning rate after `step` updates; stays at the floor past the end.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments plus schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub config: AdamConfig,
    pub schedule: CosineSchedule,
    pub step: u64,
    pub first_moment: ParamSet<T>,
    pub second_moment: ParamSet<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig, schedule: CosineSchedule) -> Self {
        OptimizerState {
            config,
            schedule,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    /// Rate used by the next update.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// One Adam update of `params` in place.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        params.check_layout(grads.params())?;
        self.first_moment.check_layout(params.params())?;
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                name: format!("gradient of {name}"),
            });
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let eps = T::from_f64_lossy(c.eps);
        let lr = T::from_f64_lossy(lr);
        let moments = self
            .first_moment
            .params_mut()
            .iter_mut()
            .zip(self.second_moment.params_mut().iter_mut());
        for ((p, g), (m, v)) in params.params_mut().iter_mut().zip(grads.params()).zip(moments) {
            Zip::from(&mut p.value)
                .and(&g.value)
                .and(&mut m.value)
                .and(&mut v.value)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::update`].
pub fn adam_step<T: Real>(
    opt: &OptimizerState<T>,
    params: &ParamSet<T>,
    grads: &ParamSet<T>,
) -> Result<(OptimizerState<T>, ParamSet<T>)> {
    let mut opt = opt.clone();
    let mut params = params.clone();
    opt.update(&mut params, grads)?;
    Ok((opt, params))
}
