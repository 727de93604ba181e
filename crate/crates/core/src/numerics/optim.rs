use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{IkError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

const FLUSH: f64 = 1e-100;

/// Adaptive-moment optimizer state with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every parameter. All gradients are validated before any
    /// parameter is touched, so a rejected step leaves the state unchanged.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(IkError::shape("adam", &[params.len()], &[grads.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(IkError::shape("adam", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(IkError::NonFiniteGradient(i));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (((w, &gj), mj), vj) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                // Moments of parameters whose gradient stays exactly zero
                // (dead units, off-support priors) decay towards subnormal
                // floats, which are very slow on common CPUs.
                if mj.abs() < FLUSH {
                    *mj = 0.0;
                }
                if *vj < FLUSH * FLUSH {
                    *vj = 0.0;
                }
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            opt.step(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m1 = 0.1, v1 = 0.001 -> mhat = 1, vhat = 1, update = lr / (1 + eps)
        let mut p = Tensor::vector(vec![0.0]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        opt.step(&mut [&mut p], &[Tensor::vector(vec![1.0])]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut w = Tensor::vector(vec![1.0]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });
        let mut converged_at = None;
        for step in 0..500 {
            let g = Tensor::vector(vec![2.0 * w.data()[0]]);
            opt.step(&mut [&mut w], &[g]).unwrap();
            if w.data()[0].abs() < 1e-3 && converged_at.is_none() {
                converged_at = Some(step);
            }
        }
        assert!(converged_at.is_some(), "w = {}", w.data()[0]);
        assert!(w.data()[0].abs() < 1e-3, "w = {}", w.data()[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = Tensor::vector(vec![0.0]);
        let mut b = Tensor::vector(vec![0.0]);
        let mut opt = Adam::new(AdamConfig::default());
        let err = opt
            .step(
                &mut [&mut a, &mut b],
                &[Tensor::vector(vec![1.0]), Tensor::vector(vec![f64::NAN])],
            )
            .unwrap_err();
        assert!(matches!(err, IkError::NonFiniteGradient(1)));
        assert_eq!(a.data()[0], 0.0);
    }
}
