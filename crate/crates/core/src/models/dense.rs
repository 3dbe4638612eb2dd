use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::DtsRng;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Affine layer `y = x W^T + b` with `W` stored row-major as `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Uniform init in `[-bound, bound]` with `bound = gain / sqrt(fan_in)`.
    pub fn init(in_dim: usize, out_dim: usize, gain: f64, rng: &mut DtsRng) -> Self {
        let bound = gain / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Dense {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.out_dim);
        for i in 0..x.rows() {
            let xi = x.row(i);
            let yi = out.row_mut(i);
            for (o, y) in yi.iter_mut().enumerate() {
                let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                *y = self.bias[o] + w.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad_w`/`grad_b` and returns the
    /// gradient with respect to the layer input.
    pub fn backward(
        &self,
        x: &Matrix,
        grad_out: &Matrix,
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> Matrix {
        let mut grad_in = Matrix::zeros(x.rows(), self.in_dim);
        for i in 0..x.rows() {
            let xi = x.row(i);
            let gi = grad_out.row(i);
            let dxi = grad_in.row_mut(i);
            for (o, &g) in gi.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad_b[o] += g;
                let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let gw = &mut grad_w[o * self.in_dim..(o + 1) * self.in_dim];
                for j in 0..self.in_dim {
                    gw[j] += g * xi[j];
                    dxi[j] += g * w[j];
                }
            }
        }
        grad_in
    }
}

pub(crate) fn activate(z: &Matrix, act: Activation) -> Matrix {
    let mut out = z.clone();
    out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
    out
}

pub(crate) fn activate_backward(z: &Matrix, grad: &Matrix, act: Activation) -> Matrix {
    let mut out = grad.clone();
    for (g, z) in out.data_mut().iter_mut().zip(z.data()) {
        *g *= act.derivative(*z);
    }
    out
}
