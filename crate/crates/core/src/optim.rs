//! Adam and plain gradient descent with a cosine learning-rate schedule.
//!
//! Moments and updates are computed in `f64` whatever the parameter type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use hazekit_tape::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// `theta -= lr * g`; used to audit gradients through the training code.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Cosine annealing from `start` at step 0 to `end` at the last step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.end > 0.0 && self.start >= self.end && self.start.is_finite()) {
            return Err(Error::Config(format!(
                "learning-rate schedule needs start >= end > 0, got {} -> {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.start;
        }
        let frac = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.end + 0.5 * (self.start - self.end) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    adam: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, adam: AdamConfig) -> Self {
        Self { kind, adam, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every tensor in `params` by its gradient in `grads`.
    pub fn step<E: Element>(&mut self, params: &mut [&mut Tensor<E>], grads: &[Tensor<E>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!("gradient {i}: {:?} vs {:?}", g.shape(), p.shape())));
            }
        }
        if self.m.is_empty() && self.kind == OptimizerKind::Adam {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x = E::of(x.as_f64() - lr * d.as_f64());
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
                    return Err(Error::State("optimizer state does not match the parameters".into()));
                }
                let AdamConfig { beta1, beta2, eps } = self.adam;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (j, (x, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let d = d.as_f64();
                        m[j] = beta1 * m[j] + (1.0 - beta1) * d;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * d * d;
                        let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        *x = E::of(x.as_f64() - update);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = CosineSchedule { start: 1e-4, end: 1e-6, total_steps: 11 };
        assert_eq!(s.lr(0), 1e-4);
        assert!((s.lr(10) - 1e-6).abs() < 1e-18);
        assert!((s.lr(5) - (1e-6 + 0.5 * (1e-4 - 1e-6))).abs() < 1e-18);
        for t in 0..10 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
        assert!(CosineSchedule { start: 1e-6, end: 1e-4, total_steps: 3 }.validate().is_err());
        assert!(CosineSchedule { start: 1e-4, end: 0.0, total_steps: 3 }.validate().is_err());
    }

    #[test]
    fn first_adam_step_moves_by_lr_in_gradient_sign() {
        let mut p: Tensor<f64> = Tensor::from_f64(vec![3], &[1.0, 1.0, 1.0]);
        let g: Tensor<f64> = Tensor::from_f64(vec![3], &[0.5, -2.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, AdamConfig::default());
        opt.step(&mut [&mut p], &[g], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-6);
        assert_eq!(p.data()[2], 1.0);
    }

    #[test]
    fn sgd_is_plain_descent() {
        let mut p: Tensor<f64> = Tensor::from_f64(vec![2], &[1.0, -1.0]);
        let g: Tensor<f64> = Tensor::from_f64(vec![2], &[0.25, 4.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, AdamConfig::default());
        opt.step(&mut [&mut p], &[g], 0.5).unwrap();
        assert_eq!(p.data(), &[0.875, -3.0]);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p: Tensor<f64> = Tensor::zeros(vec![2]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, AdamConfig::default());
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(vec![3])], 0.1).is_err());
        assert!(opt.step::<f64>(&mut [&mut p], &[], 0.1).is_err());
    }
}
