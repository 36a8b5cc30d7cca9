//! Adam with decoupled or coupled weight decay, and learning-rate schedules.

use crate::error::{NnError, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightDecay {
    /// `θ ← θ − lr·λ·θ` applied outside the adaptive update.
    Decoupled(f64),
    /// `g ← g + λ·θ` before the moment updates.
    CoupledL2(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: WeightDecay,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: WeightDecay::Decoupled(0.0),
        }
    }
}

impl Adam {
    pub fn with_weight_decay(weight_decay: WeightDecay) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }

    /// One bias-corrected update of every parameter from its accumulated
    /// gradient. Gradients are checked first, so a rejected step leaves the
    /// store untouched. Gradients are not cleared.
    pub fn step(&self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(NnError::NonFiniteGradient(p.name.clone()));
        }
        for p in store.iter_mut() {
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let value = p.value.data_mut();
            let grad = p.grad.data();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for i in 0..value.len() {
                let mut gi = grad[i];
                if let WeightDecay::CoupledL2(l) = self.weight_decay {
                    gi += l * value[i];
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                if let WeightDecay::Decoupled(l) = self.weight_decay {
                    value[i] -= lr * l * value[i];
                }
                value[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `factor · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
    InverseSqrtWarmup {
        factor: f64,
        d_model: usize,
        warmup: usize,
    },
}

impl LrSchedule {
    /// Rate for the 1-based optimizer `step`.
    pub fn rate(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::InverseSqrtWarmup {
                factor,
                d_model,
                warmup,
            } => {
                let s = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
            }
        }
    }
}
