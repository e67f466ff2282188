use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update over every parameter, using the
    /// gradients currently accumulated in the store. Gradients are left in
    /// place; call [`ParamStore::zero_grad`] before the next accumulation.
    pub fn step(&self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        for p in store.iter_mut() {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let n = p.value.len();
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for k in 0..n {
                let g = grad[k];
                value[k] -= lr * self.weight_decay * value[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                value[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning-rate schedules indexed by optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant { lr: f64 },
    /// Single half-cosine from `max_lr` at step 0 to 0 at `total_steps`.
    Cosine { max_lr: f64, total_steps: usize },
    /// Linear warm-up from `max_lr / 25` to `max_lr` over the first
    /// `floor(0.3 * total_steps)` steps, then cosine decay to `max_lr / 1e4`.
    OneCycle { max_lr: f64, total_steps: usize },
}

pub const ONE_CYCLE_WARMUP: f64 = 0.3;
const ONE_CYCLE_START_DIV: f64 = 25.0;
const ONE_CYCLE_FINAL_DIV: f64 = 1e4;

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let (lr, total) = match *self {
            Schedule::Constant { lr } => (lr, 1),
            Schedule::Cosine { max_lr, total_steps } | Schedule::OneCycle { max_lr, total_steps } => {
                (max_lr, total_steps)
            }
        };
        if !(lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        if total == 0 {
            return Err(Error::Parameter("schedule needs total_steps > 0".into()));
        }
        Ok(())
    }

    /// Same schedule kind and peak rate, stretched to a new step budget.
    pub fn with_total_steps(&self, total_steps: usize) -> Schedule {
        match *self {
            Schedule::Constant { lr } => Schedule::Constant { lr },
            Schedule::Cosine { max_lr, .. } => Schedule::Cosine { max_lr, total_steps },
            Schedule::OneCycle { max_lr, .. } => Schedule::OneCycle { max_lr, total_steps },
        }
    }

    pub fn peak(&self) -> f64 {
        match *self {
            Schedule::Constant { lr } => lr,
            Schedule::Cosine { max_lr, .. } | Schedule::OneCycle { max_lr, .. } => max_lr,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Schedule::Constant { lr } => lr,
            Schedule::Cosine { max_lr, total_steps } => {
                let t = step.min(total_steps) as f64 / total_steps as f64;
                0.5 * max_lr * (1.0 + (PI * t).cos())
            }
            Schedule::OneCycle { max_lr, total_steps } => {
                let warmup = (ONE_CYCLE_WARMUP * total_steps as f64).floor() as usize;
                let start = max_lr / ONE_CYCLE_START_DIV;
                let end = max_lr / ONE_CYCLE_FINAL_DIV;
                if step < warmup {
                    start + (max_lr - start) * step as f64 / warmup as f64
                } else {
                    let span = (total_steps - warmup).max(1) as f64;
                    let t = (step.min(total_steps) - warmup) as f64 / span;
                    end + 0.5 * (max_lr - end) * (1.0 + (PI * t).cos())
                }
            }
        }
    }
}
