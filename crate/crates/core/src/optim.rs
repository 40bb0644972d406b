//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor<S>>,
    pub second_moment: Vec<Tensor<S>>,
    pub step_count: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            config,
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
        }
    }

    /// Applies one update to every trainable parameter holding a gradient.
    /// Frozen parameters are not touched.
    pub fn step(&mut self, store: &mut ParamStore<S>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = S::from_f64(1.0 - beta1.powi(t));
        let bc2 = S::from_f64(1.0 - beta2.powi(t));
        let (b1, b2) = (S::from_f64(beta1), S::from_f64(beta2));
        let (lr, eps) = (S::from_f64(lr), S::from_f64(epsilon));

        for (i, p) in store.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[j] = b1 * m[j] + (S::ONE - b1) * g;
                v[j] = b2 * v[j] + (S::ONE - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Component;

    fn single(value: f64, grad: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.add("w", Component::Classifier, Tensor::scalar(value));
        store.get_mut(id).grad = Some(Tensor::scalar(grad));
        store
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = single(0.7, 0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        adam.step(&mut store);
        assert_eq!(store.iter().next().unwrap().1.value.data(), &[0.7]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut store = single(1.0, g);
            let mut adam = AdamState::new(&store, AdamConfig::default());
            adam.step(&mut store);
            let w = store.iter().next().unwrap().1.value.data()[0];
            assert!(((1.0 - w) - 1e-4 * f64::signum(g)).abs() < 1e-6 * 1e-4 + 1e-10);
        }
    }

    /// Plain scalar Adam written independently of the store plumbing.
    fn scalar_adam(mut w: f64, grads: &[f64], lr: f64) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        w
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let config = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut store = single(0.5, 0.3);
        let mut adam = AdamState::new(&store, config);
        adam.step(&mut store);
        store.iter_mut().next().unwrap().grad = Some(Tensor::scalar(-1.7));
        adam.step(&mut store);
        let w = store.iter().next().unwrap().1.value.data()[0];
        assert!((w - scalar_adam(0.5, &[0.3, -1.7], 0.01)).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = single(0.5, 1.0);
        store.freeze(&[Component::Classifier]);
        store.iter_mut().next().unwrap().grad = Some(Tensor::scalar(1.0));
        let mut adam = AdamState::new(&store, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut store);
        }
        assert_eq!(store.iter().next().unwrap().1.value.data()[0].to_bits(), 0.5f64.to_bits());
    }
}
