use indexmap::IndexMap;

use super::{ModelState, TensorError, TensorResult};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CosineSchedule {
    pub total_steps: u64,
    pub base_lr: f64,
    pub min_lr: f64,
}

impl CosineSchedule {
    /// Learning rate for 0-based `step`; the last step runs at `min_lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        cosine_lr(step, self.total_steps.saturating_sub(1), self.base_lr, self.min_lr)
    }
}

/// `min + ½(base − min)(1 + cos(π·step/total))`, clamped to `min` past the end.
pub fn cosine_lr(step: u64, total: u64, base: f64, min: f64) -> f64 {
    if step >= total {
        return min;
    }
    let progress = step as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam moments for every trainable parameter of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub schedule: CosineSchedule,
    pub first: IndexMap<String, Vec<T>>,
    pub second: IndexMap<String, Vec<T>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &ModelState<T>, config: AdamConfig, schedule: CosineSchedule) -> TensorResult<Self> {
        if !(0.0 < config.beta1 && config.beta1 < 1.0 && 0.0 < config.beta2 && config.beta2 < 1.0) {
            return Err(TensorError::Shape {
                op: "OptimizerState::new",
                reason: format!("Adam betas must lie in (0, 1): {config:?}"),
            });
        }
        let zeros = || -> IndexMap<String, Vec<T>> {
            model
                .iter()
                .filter(|(_, p)| p.requires_grad)
                .map(|(n, p)| (n.to_string(), vec![T::zero(); p.value.len()]))
                .collect()
        };
        Ok(Self {
            config,
            schedule,
            first: zeros(),
            second: zeros(),
            t: 0,
        })
    }

    /// One bias-corrected Adam update at learning rate `lr`; clears grads.
    pub fn step(&mut self, model: &mut ModelState<T>, lr: f64) -> TensorResult<()> {
        for (name, p) in model.iter() {
            if p.requires_grad && p.grad.is_none() {
                return Err(TensorError::MissingGrad(name.to_string()));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.config.beta1), T::of(self.config.beta2));
        let eps = T::of(self.config.eps);
        let c1 = T::of(1.0 - self.config.beta1.powf(self.t as f64));
        let c2 = T::of(1.0 - self.config.beta2.powf(self.t as f64));
        let lr = T::of(lr);
        for (name, p) in model.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let m = self
                .first
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
            let v = self.second.get_mut(name).expect("moments share keys");
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        model.step += 1;
        Ok(())
    }
}
