//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::Parameters;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Parameters<T>, config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update from the gradients currently stored in `params`. Gradients are
    /// left as they are; the caller zeroes them.
    pub fn step(&mut self, params: &mut Parameters<T>) -> Result<()> {
        if self.m.len() != params.len()
            || params
                .iter()
                .zip(&self.m)
                .zip(&self.v)
                .any(|((p, m), v)| m.shape() != p.value.shape() || v.shape() != p.value.shape())
        {
            return Err(Error::Contract(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.epsilon));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for (((w, &g), mi), vi) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Parameters<f64> {
        let mut p = Parameters::new();
        p.add("p", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = scalar_param(0.7);
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.step(&mut p).unwrap();
        assert_eq!(p.iter().next().unwrap().value.data()[0], 0.7);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(1.0);
        let mut s = AdamState::new(
            &p,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        p.iter_mut().next().unwrap().grad.fill(1.0);
        s.step(&mut p).unwrap();
        let moved = p.iter().next().unwrap().value.data()[0] - 1.0;
        assert!((moved + 0.1).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn converges_on_square() {
        let mut p = scalar_param(1.0);
        let mut s = AdamState::new(
            &p,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        for _ in 0..100 {
            let param = p.iter_mut().next().unwrap();
            let x = param.value.data()[0];
            param.grad.fill(2.0 * x);
            s.step(&mut p).unwrap();
        }
        assert!(p.iter().next().unwrap().value.data()[0].abs() < 0.1);
        assert_eq!(s.t, 100);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = scalar_param(1.0);
        let mut s = AdamState::new(&Parameters::<f64>::new(), AdamConfig::default());
        assert!(matches!(s.step(&mut p), Err(Error::Contract(_))));
    }
}
