// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam hyperparameters. No weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    /// Step size.
    pub learning_rate: f64,
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    /// Denominator offset.
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Default betas and epsilon with the given learning rate.
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    /// Zeroed state for `len` parameters.
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_with_lr(params, grads, self.config.learning_rate)
    }

    /// One update at an explicit learning rate (used by warmup schedules).
    pub fn step_with_lr(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::contract(format!(
                "adam_step: params {} / grads {} / state {} lengths differ",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        self.step_count += 1;
        let AdamConfig {
            beta1, beta2, epsilon, ..
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line scalar Adam, written independently of `AdamState`.
    fn reference_adam_quadratic(x0: f64, steps: usize, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8_f64);
        let mut x = x0;
        let mut m = 0.0;
        let mut v = 0.0;
        let mut b1t = 1.0;
        let mut b2t = 1.0;
        for _ in 0..steps {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            b1t *= b1;
            b2t *= b2;
            x -= lr * (m / (1.0 - b1t)) / ((v / (1.0 - b2t)).sqrt() + eps);
        }
        x
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut st = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 3.5];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            epsilon: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(1, cfg);
        let mut p = vec![0.0];
        st.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        let expected = reference_adam_quadratic(1.0, 10, 1e-3);
        let mut st = AdamState::new(1, AdamConfig::default());
        let mut p = vec![1.0];
        for _ in 0..10 {
            let g = [2.0 * p[0]];
            st.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - expected).abs() < 1e-12, "{} vs {}", p[0], expected);
        assert_eq!(st.step_count(), 10);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0; 2];
        assert!(matches!(st.step(&mut p, &[1.0]), Err(Error::Contract(_))));
        let mut p3 = vec![0.0; 3];
        assert!(st.step(&mut p3, &[1.0; 3]).is_err());
    }

    #[test]
    fn step_is_deterministic_and_second_moment_nonnegative() {
        let mut a = AdamState::new(4, AdamConfig::default());
        let mut b = a.clone();
        let mut pa = vec![0.1, 0.2, -0.3, 0.4];
        let mut pb = pa.clone();
        for i in 0..20 {
            let g: Vec<f64> = (0..4).map(|j| ((i * 7 + j) as f64).sin()).collect();
            a.step(&mut pa, &g).unwrap();
            b.step(&mut pb, &g).unwrap();
            assert!(a.second_moment().iter().all(|&v| v >= 0.0));
        }
        assert_eq!(pa, pb);
        assert_eq!(a, b);
    }
}
