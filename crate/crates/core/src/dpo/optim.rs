//! Adam and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy_world::ToyPolicy;

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let Schedule {
            peak_lr,
            warmup_steps,
            total_steps,
        } = *self;
        if step > total_steps || warmup_steps > total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: total_steps,
            });
        }
        if step < warmup_steps {
            return Ok(peak_lr * step as f64 / warmup_steps as f64);
        }
        let span = total_steps - warmup_steps;
        if span == 0 {
            return Ok(peak_lr);
        }
        let progress = (step - warmup_steps) as f64 / span as f64;
        Ok(0.5 * peak_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Adam {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Bias-corrected Adam update on raw parameters.
    ///
    /// Rejects the whole update, leaving state untouched, if any gradient
    /// entry is non-finite; the error carries the first offending index.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<(), (usize, f64)> {
        assert_eq!(params.len(), self.m.len(), "parameter/moment shape mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient/moment shape mismatch");
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err((i, grad[i]));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// [`Adam::apply`] on a policy's logit table, naming the offending
    /// feature on failure.
    pub fn step(&mut self, policy: &mut ToyPolicy, grad: &[f64], lr: f64) -> Result<()> {
        match self.apply(policy.params_mut(), grad, lr) {
            Ok(()) => Ok(()),
            Err((index, value)) => {
                let (feature, token) = policy.describe_param(index);
                Err(Error::NonFiniteGradient {
                    index,
                    feature,
                    token,
                    value,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(warmup: usize, total: usize) -> Schedule {
        Schedule {
            peak_lr: 0.01,
            warmup_steps: warmup,
            total_steps: total,
        }
    }

    #[test]
    fn schedule_knots() {
        let s = sched(10, 110);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(5).unwrap(), 0.005);
        assert_eq!(s.lr_at(10).unwrap(), 0.01);
        assert!(s.lr_at(110).unwrap().abs() < 1e-15);
        assert!((s.lr_at(60).unwrap() - 0.005).abs() < 1e-15);
        assert!(matches!(
            s.lr_at(111),
            Err(Error::StepOutOfRange { step: 111, total: 110 })
        ));
    }

    #[test]
    fn schedule_without_warmup_starts_at_peak() {
        let s = sched(0, 100);
        assert_eq!(s.lr_at(0).unwrap(), 0.01);
        assert!(s.lr_at(100).unwrap().abs() < 1e-15);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = sched(7, 53);
        let lrs: Vec<f64> = (7..=53).map(|t| s.lr_at(t).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        adam.apply(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_scalar_case() {
        // m_hat = g, v_hat = g^2 after one bias-corrected step.
        let mut adam = Adam::new(1, AdamConfig::default());
        let mut p = vec![0.0];
        let (g, lr) = (0.3_f64, 0.01);
        adam.apply(&mut p, &[g], lr).unwrap();
        let expected = -lr * g / (g.abs() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-18);
        assert!((p[0] + 0.009_999_999_666_666_68).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut adam = Adam::new(1, AdamConfig::default());
        let mut p = vec![0.0];
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0];
            adam.apply(&mut p, &[-4.0], 0.001).unwrap();
            last = p[0] - before;
        }
        assert!((last - 0.001).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut adam = Adam::new(2, AdamConfig::default());
        let mut p = vec![1.0, 1.0];
        assert_eq!(adam.apply(&mut p, &[0.1, f64::NAN], 0.1).unwrap_err().0, 1);
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(adam.steps_taken(), 0);
    }
}
