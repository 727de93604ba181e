//! Parameter-holding building blocks shared by the hypernetwork and the MLP
//! baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{BatchStats, Tape, Var};
use super::tensor::{gemm, Tensor};
use crate::error::{IkError, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

/// Fully-connected layer, `y = x·W + b` with `W` stored `[in×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init in `±scale/√fan_in`, bias zero.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, scale: f64, rng: &mut R) -> Self {
        let bound = scale / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("init shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.fan_in() {
            return Err(IkError::shape("linear", x.shape(), self.weight.shape()));
        }
        let (b, n) = (x.rows(), self.fan_out());
        let mut out = Vec::with_capacity(b * n);
        for _ in 0..b {
            out.extend_from_slice(self.bias.data());
        }
        gemm(
            false,
            false,
            b,
            self.fan_in(),
            n,
            x.data(),
            self.weight.data(),
            &mut out,
            true,
        );
        Tensor::matrix(b, n, out)
    }

    pub fn record(&self, tape: &mut Tape, x: Var, params: &mut Vec<Var>) -> Result<Var> {
        let w = tape.param(self.weight.clone());
        let b = tape.param(self.bias.clone());
        params.push(w);
        params.push(b);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Batch norm with learnable scale/shift and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Inference using the frozen running statistics.
    pub fn forward_infer(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if x.cols() != d {
            return Err(IkError::shape("batch_norm", x.shape(), self.gamma.shape()));
        }
        let scale: Vec<f64> = (0..d)
            .map(|j| self.gamma.data()[j] / (self.running_var[j] + BN_EPS).sqrt())
            .collect();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.running_mean[j]) * scale[j] + self.beta.data()[j];
        }
        Ok(out)
    }

    /// Records a train-mode pass using batch statistics. The running
    /// averages are untouched; see [`BatchNorm::update_running`].
    pub fn record_train(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &mut Vec<Var>,
    ) -> Result<(Var, BatchStats)> {
        let g = tape.param(self.gamma.clone());
        let b = tape.param(self.beta.clone());
        params.push(g);
        params.push(b);
        tape.batch_norm(x, g, b, BN_EPS)
    }

    /// Train-mode forward without a tape.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, BatchStats)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(self.gamma.clone());
        let b = tape.constant(self.beta.clone());
        let (out, stats) = tape.batch_norm(xv, g, b, BN_EPS)?;
        Ok((tape.value(out).clone(), stats))
    }

    /// Exponential moving average of the batch statistics. The running
    /// variance uses the unbiased estimate.
    pub fn update_running(&mut self, stats: &BatchStats, batch: usize) {
        let n = batch as f64;
        for j in 0..self.dim() {
            self.running_mean[j] =
                (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * stats.mean[j];
            let unbiased = stats.var[j] * n / (n - 1.0);
            self.running_var[j] =
                (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * unbiased;
        }
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}
