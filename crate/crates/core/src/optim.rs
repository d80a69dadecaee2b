//! Adam with bias correction.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.dims())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One update of every parameter, in parameter order.
    ///
    /// `m <- b1 m + (1 - b1) g`, `v <- b2 v + (1 - b2) g^2`,
    /// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)` with
    /// `m_hat = m / (1 - b1^t)` and `v_hat = v / (1 - b2^t)`.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<()> {
        grads.check_layout(params)?;
        let aligned =
            self.first.len() == params.len() && params.iter().zip(&self.first).all(|((_, p), m)| p.dims() == m.dims());
        if !aligned {
            return Err(Error::shape(
                "adam_step",
                "optimizer state was created for a different parameter layout",
            ));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = T::from_f64(1.0 - libm::pow(c.beta1, t));
        let bc2 = T::from_f64(1.0 - libm::pow(c.beta2, t));
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));

        for (i, (name, p)) in params.iter_mut().enumerate() {
            let g = grads.get(name).expect("layout checked");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = b1 * *mj + one_b1 * gj;
                *vj = b2 * *vj + one_b2 * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *pj -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step<T: Real>(params: &mut ModelParams<T>, grads: &ModelParams<T>, state: &mut AdamState<T>) -> Result<()> {
    state.step(params, grads)
}
