use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::graph::BN_EPS;
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Fan-in scaled uniform initialization: `U(-s/sqrt(fan_in), s/sqrt(fan_in))`.
pub(crate) fn uniform_init(rows: usize, cols: usize, fan_in: usize, scale: f64, rng: &mut Rng) -> Tensor {
    let bound = scale / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches data")
}

/// Affine layer `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(in_dim, out_dim, in_dim, scale, rng));
        let bias = store.add(format!("{name}.bias"), uniform_init(1, out_dim, in_dim, scale, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Per-column batch normalization with learnable scale and shift.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, momentum: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum,
        }
    }

    /// Normalizes by batch statistics and folds them into the running
    /// moments (the running variance uses the unbiased batch variance).
    pub fn forward_train(&mut self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (y, mean, var) = g.batch_norm_train(x, gamma, beta)?;
        let n = g.shape(x).0 as f64;
        let m = self.momentum;
        for j in 0..mean.len() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * var[j] * n / (n - 1.0);
        }
        Ok(y)
    }

    /// Normalizes by the running moments; gradients flow to the input only.
    pub fn forward_eval(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (rows, cols) = g.shape(x);
        let gamma = store.value(self.gamma).data();
        let beta = store.value(self.beta).data();
        let scale: Vec<f64> = (0..cols)
            .map(|j| gamma[j] / (self.running_var[j] + BN_EPS).sqrt())
            .collect();
        let shift: Vec<f64> = (0..cols)
            .map(|j| beta[j] - self.running_mean[j] * scale[j])
            .collect();
        let mut s = Tensor::zeros(rows, cols);
        for r in 0..rows {
            s.row_mut(r).copy_from_slice(&scale);
        }
        let s = g.constant(s);
        let shift = g.constant(Tensor::from_vec(1, cols, shift)?);
        let scaled = g.mul(x, s)?;
        g.add_row(scaled, shift)
    }
}
