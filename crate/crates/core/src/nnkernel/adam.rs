use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tensor::{Real, Tensor};
use super::KernelError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment optimizer state, one pair of moment tensors per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Adam { config, step: 0, first: zeros(), second: zeros() }
    }

    /// One bias-corrected update using the gradients currently stored in
    /// `params`. Fails without touching anything if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<(), KernelError> {
        if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(KernelError::NonFinite { param: bad.name.clone() });
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(self.config.beta1);
        let b2 = T::of(self.config.beta2);
        let lr = T::of(self.config.lr);
        let eps = T::of(self.config.eps);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for (((x, &g), mi), vi) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
