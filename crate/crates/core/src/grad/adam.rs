use serde::{Deserialize, Serialize};

use super::GradError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), GradError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(GradError::ShapeMismatch {
                expected: self.m.len(),
                found: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Cosine interpolation from `lr` at step 0 to `lr * final_fraction` at the
/// last step.
pub fn cosine_lr(lr: f64, final_fraction: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let progress = step as f64 / (total - 1) as f64;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    lr * (final_fraction + (1.0 - final_fraction) * w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_lr_times_sign() {
        // t = 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut adam = AdamState::new(3, cfg);
        let mut p = vec![0.0; 3];
        let g = [3.0, -0.2, 1e-3];
        adam.step(&mut p, &g).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15);
            assert!((pi.abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_gradient_descends() {
        let mut adam = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        for _ in 0..100 {
            adam.step(&mut p, &[2.0, -5.0]).unwrap();
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0; 3];
        assert!(matches!(
            adam.step(&mut p, &[0.0; 3]),
            Err(GradError::ShapeMismatch { expected: 2, found: 3 })
        ));
        assert_eq!(adam.step_count(), 0);
    }
}
