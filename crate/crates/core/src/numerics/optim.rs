//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{NumericsError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Bias-corrected Adam. Moment buffers follow the store's registration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |store: &ParamStore| {
            store
                .ids()
                .map(|id| {
                    let [r, c] = store.value(id).shape();
                    Tensor::zeros(r, c)
                })
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(store),
            second: zeros(store),
        }
    }

    /// Applies one update with learning rate `lr`, then zeroes gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), NumericsError> {
        if self.first.len() != store.len() {
            return Err(NumericsError::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (value, grad) = store.value_and_grad_mut(id);
            let m = self.first[idx].data_mut();
            let v = self.second[idx].data_mut();
            for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !value.is_finite() {
                return Err(NumericsError::NumericalFault(format!("parameter `{}` diverged", store.name(id))));
            }
        }
        store.zero_grad();
        Ok(())
    }
}

/// Plain gradient descent `w ← w − lr·g`, then zeroes gradients.
pub fn sgd_step(store: &mut ParamStore, lr: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let (value, grad) = store.value_and_grad_mut(id);
        for (w, g) in value.data_mut().iter_mut().zip(grad.data()) {
            *w -= lr * g;
        }
    }
    store.zero_grad();
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    /// `factor · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`
    Noam {
        d_model: usize,
        warmup: u64,
        #[serde(default = "one")]
        factor: f64,
    },
    /// `base · decay^epoch`
    EpochDecay {
        base: f64,
        decay: f64,
    },
    Constant {
        rate: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl LrSchedule {
    /// Rate for a 1-based optimizer `step` within 0-based `epoch`.
    pub fn rate(&self, step: u64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Noam { d_model, warmup, factor } => {
                let s = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
            }
            LrSchedule::EpochDecay { base, decay } => base * decay.powi(epoch as i32),
            LrSchedule::Constant { rate } => rate,
        }
    }
}
