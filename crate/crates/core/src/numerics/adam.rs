use alloc::vec;
use alloc::vec::Vec;

use super::nn::ParamStore;
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are laid out like the store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        AdamState {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - math::powi(b1, self.step as i32);
        let c2 = 1.0 - math::powi(b2, self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.first_moment[k], &mut self.second_moment[k]);
            let grad = p.grad.data();
            let w = p.tensor.data_mut();
            for i in 0..w.len() {
                let gi = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= lr * mhat / (math::sqrt(vhat) + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.7);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut s);
        }
        assert_eq!(s.get(s.id("w").unwrap()).tensor.item(), 0.7);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias-corrected mhat = g, vhat = g^2, so the step is lr * g/(|g| + eps).
        let mut s = scalar_store(0.0);
        let id = s.id("w").unwrap();
        s.get_mut(id).grad = Tensor::scalar(1.0);
        let mut adam = AdamState::new(
            &s,
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
        );
        adam.step(&mut s);
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(id).tensor.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = scalar_store(1.0);
        let id = s.id("w").unwrap();
        let mut adam = AdamState::new(
            &s,
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
        );
        for _ in 0..200 {
            let w = s.get(id).tensor.item();
            s.get_mut(id).grad = Tensor::scalar(2.0 * w);
            adam.step(&mut s);
        }
        assert!(s.get(id).tensor.item().abs() < 1e-2);
    }
}
