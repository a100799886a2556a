use alloc::vec;
use alloc::vec::Vec;

use super::{ParamSet, Scalar};
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }
}

/// Per-parameter moment buffers for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    pub strict: bool,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::InvalidArgument(alloc::format!("learning rate must be positive, got {}", config.lr)));
        }
        let zeros = || params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Ok(Self { config, step: 0, first: zeros(), second: zeros(), strict: false })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    /// Restores state saved with [`Adam::moments`] and [`Adam::step_count`].
    pub fn restore(&mut self, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<()> {
        let same = |a: &[Vec<T>]| a.len() == self.first.len() && a.iter().zip(&self.first).all(|(x, y)| x.len() == y.len());
        if !same(&first) || !same(&second) {
            return Err(Error::InvalidArgument("adam moments do not match parameter layout".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One bias-corrected Adam update from the gradients stored on `params`,
    /// which are cleared afterwards. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(Error::InvalidArgument("optimizer state does not match parameter set".into()));
        }
        if self.strict {
            for (_, name, t) in params.iter() {
                if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                    return Err(Error::NonFiniteGrad { name: name.into() });
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let t = self.step as i32;
        let bc1 = T::one() - T::from_f64(libm::pow(c.beta1, t as f64));
        let bc2 = T::one() - T::from_f64(libm::pow(c.beta2, t as f64));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for ((tensor, m), v) in params.tensors_mut().iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = tensor.grad().map(<[T]>::to_vec);
            let values = tensor.values_mut();
            for j in 0..values.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                values[j] = values[j] - lr * mhat / (vhat.sqrt() + eps);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
