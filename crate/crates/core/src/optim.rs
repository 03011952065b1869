use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::real::Real;

/// Adam hyperparameters other than the learning rate.
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

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam step, in place.
    pub fn step(&mut self, cfg: &AdamConfig, lr: f64, param: &mut [T], grad: &[T]) {
        assert_eq!(param.len(), self.m.len(), "adam: parameter length changed");
        assert_eq!(grad.len(), self.m.len(), "adam: gradient length mismatch");
        self.t += 1;
        let t = self.t as i32;
        let bias1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let bias2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one = T::one();
        let step = T::from_f64(lr / bias1);
        let root_bias2 = T::from_f64(libm::sqrt(bias2));
        let eps = T::from_f64(cfg.eps);
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p = *p - step * *m / (v.sqrt() / root_bias2 + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // After one step m_hat = g and v_hat = g^2, so the move is lr * g / (|g| + eps).
        let mut adam = Adam::<f64>::new(3);
        let mut p = [1.0, -2.0, 0.5];
        adam.step(&AdamConfig::default(), 0.01, &mut p, &[3.0, -0.5, 0.0]);
        assert!((p[0] - (1.0 - 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert_eq!(p[2], 0.5);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::<f32>::new(2);
        let mut p = [3.0f32, -4.0];
        for _ in 0..3000 {
            let g = [2.0 * p[0], 2.0 * p[1]];
            adam.step(&AdamConfig::default(), 0.01, &mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut adam = Adam::<f64>::new(1);
        let mut p = [0.3];
        adam.step(&AdamConfig::default(), 0.0, &mut p, &[5.0]);
        assert_eq!(p, [0.3]);
    }
}
