use serde::{Deserialize, Serialize};

use super::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative at pre-activation `v`.
    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        self.derivative_from(v, self.apply(v))
    }

    /// Derivative given both the pre-activation `v` and the cached output `y`.
    #[inline]
    pub fn derivative_from(self, v: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn forward(self, m: &Matrix) -> Matrix {
        m.map(|v| self.apply(v))
    }

    /// `dv = dy ⊙ f'(v)` using the cached forward output `y`.
    pub fn backward(self, v: &Matrix, y: &Matrix, dy: &Matrix) -> Matrix {
        let mut out = dy.clone();
        for ((o, &pv), &py) in out
            .as_mut_slice()
            .iter_mut()
            .zip(v.as_slice())
            .zip(y.as_slice())
        {
            *o *= self.derivative_from(pv, py);
        }
        out
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
