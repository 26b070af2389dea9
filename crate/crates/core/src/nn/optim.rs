use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Piecewise-constant decay: `base · factor^(floor(progress / every))`.
///
/// `progress` counts completed epochs or steps, whichever the caller feeds
/// through [`AdamW::set_progress`]. `every == 0` means a constant rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base: f64,
    pub factor: f64,
    pub every: u64,
}

impl StepSchedule {
    pub fn constant(base: f64) -> Self {
        StepSchedule { base, factor: 1.0, every: 0 }
    }

    pub fn rate(&self, progress: u64) -> f64 {
        if self.every == 0 {
            return self.base;
        }
        self.base * self.factor.powi((progress / self.every) as i32)
    }
}

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    schedule: StepSchedule,
    lr: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParameterStore, schedule: StepSchedule, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape().to_vec())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            lr: schedule.rate(0),
            schedule,
            step: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &StepSchedule {
        &self.schedule
    }

    /// Schedule callback: `progress` completed epochs (or steps).
    pub fn set_progress(&mut self, progress: u64) {
        self.lr = self.schedule.rate(progress);
    }

    /// Applies one update from the accumulated gradients. A non-finite
    /// gradient rejects the whole step and leaves every parameter untouched.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Config("optimizer state does not match parameter store".into()));
        }
        for id in store.ids() {
            if !store.grad(id).is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let grad = store.grad(id).data().to_vec();
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * self.weight_decay * p[i];
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
