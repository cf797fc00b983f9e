use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Binary connectivity mask with the same layout as the weight it gates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskRepr", into = "MaskRepr")]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c));
            }
        }
        Self { rows, cols, bits }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_active(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn row_active(&self, r: usize) -> bool {
        self.bits[r * self.cols..(r + 1) * self.cols].iter().any(|&b| b)
    }

    pub fn col_active(&self, c: usize) -> bool {
        (0..self.rows).any(|r| self.get(r, c))
    }

    pub fn active_rows(&self) -> Vec<usize> {
        (0..self.rows).filter(|&r| self.row_active(r)).collect()
    }

    pub fn active_cols(&self) -> Vec<usize> {
        let mut seen = vec![false; self.cols];
        for r in 0..self.rows {
            for (c, s) in seen.iter_mut().enumerate() {
                *s |= self.get(r, c);
            }
        }
        (0..self.cols).filter(|&c| seen[c]).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    rows: usize,
    cols: usize,
    /// Row-major bits packed MSB-first, hex encoded.
    bits: String,
}

impl From<Mask> for MaskRepr {
    fn from(m: Mask) -> Self {
        let mut bytes = vec![0u8; m.bits.len().div_ceil(8)];
        for (i, &b) in m.bits.iter().enumerate() {
            if b {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        MaskRepr {
            rows: m.rows,
            cols: m.cols,
            bits: hex::encode(bytes),
        }
    }
}

impl TryFrom<MaskRepr> for Mask {
    type Error = String;

    fn try_from(r: MaskRepr) -> std::result::Result<Self, String> {
        let bytes = hex::decode(&r.bits).map_err(|e| e.to_string())?;
        let n = r.rows * r.cols;
        if bytes.len() != n.div_ceil(8) {
            return Err(format!("mask {}x{} has {} packed bytes", r.rows, r.cols, bytes.len()));
        }
        let bits = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Ok(Mask {
            rows: r.rows,
            cols: r.cols,
            bits,
        })
    }
}

/// Affine layer `y = (W ⊗ Msk)·x + b` whose weight gradient is accumulated for
/// every entry, dormant ones included, so growth rules can rank them.
///
/// Activations are feature-major: an input batch is an `in × batch` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub struct MaskedLinear {
    weight: Matrix,
    mask: Mask,
    bias: Vec<f64>,
    grad_w: Matrix,
    grad_b: Vec<f64>,
    dormant_grads: bool,
}

impl MaskedLinear {
    /// Zero weights, dense mask.
    pub fn new(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            mask: Mask::ones(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            grad_w: Matrix::zeros(out_dim, in_dim),
            grad_b: vec![0.0; out_dim],
            dormant_grads: true,
        }
    }

    /// When off, `backward` skips the weight gradient of dormant entries
    /// (left untouched). Active-entry gradients are bitwise unaffected. On by
    /// default; turning it off is a speed knob for phases that never read
    /// dormant gradients.
    pub fn set_dormant_grads(&mut self, on: bool) {
        self.dormant_grads = on;
    }

    pub fn dormant_grads(&self) -> bool {
        self.dormant_grads
    }

    pub fn from_parts(weight: Matrix, mask: Mask, bias: Vec<f64>) -> Result<Self> {
        if (mask.rows(), mask.cols()) != weight.shape() {
            return Err(Error::Shape {
                op: "MaskedLinear::from_parts",
                left: weight.shape(),
                right: (mask.rows(), mask.cols()),
            });
        }
        if bias.len() != weight.rows() {
            return Err(Error::contract(format!(
                "bias length {} for {} output rows",
                bias.len(),
                weight.rows()
            )));
        }
        let (r, c) = weight.shape();
        Ok(Self {
            weight,
            mask,
            bias,
            grad_w: Matrix::zeros(r, c),
            grad_b: vec![0.0; r],
            dormant_grads: true,
        })
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    /// Raw weight access. Callers that break `Msk=0 ⟹ W=0` must call
    /// [`MaskedLinear::apply_mask`] afterwards.
    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn grad_w(&self) -> &Matrix {
        &self.grad_w
    }

    pub fn grad_b(&self) -> &[f64] {
        &self.grad_b
    }

    /// Replaces the mask and re-applies it.
    pub fn set_mask(&mut self, mask: Mask) -> Result<()> {
        if (mask.rows(), mask.cols()) != self.weight.shape() {
            return Err(Error::Shape {
                op: "MaskedLinear::set_mask",
                left: self.weight.shape(),
                right: (mask.rows(), mask.cols()),
            });
        }
        self.mask = mask;
        self.apply_mask();
        Ok(())
    }

    /// Zeroes every masked weight and the bias of every row with no active
    /// entry (a dead neuron contributes nothing, bias included).
    pub fn apply_mask(&mut self) {
        let cols = self.in_dim();
        for r in 0..self.out_dim() {
            let mut live = false;
            for c in 0..cols {
                if self.mask.get(r, c) {
                    live = true;
                } else {
                    self.weight[(r, c)] = 0.0;
                }
            }
            if !live {
                self.bias[r] = 0.0;
            }
        }
    }

    pub fn activate(&mut self, r: usize, c: usize, value: f64) {
        self.mask.set(r, c, true);
        self.weight[(r, c)] = value;
    }

    pub fn deactivate(&mut self, r: usize, c: usize) {
        self.mask.set(r, c, false);
        self.weight[(r, c)] = 0.0;
    }

    pub fn deactivate_row(&mut self, r: usize) {
        for c in 0..self.in_dim() {
            self.deactivate(r, c);
        }
        self.bias[r] = 0.0;
    }

    pub fn deactivate_col(&mut self, c: usize) {
        for r in 0..self.out_dim() {
            self.deactivate(r, c);
        }
        self.apply_mask();
    }

    pub fn active_weights(&self) -> usize {
        self.mask.count_active()
    }

    /// Biases of rows that still have at least one active weight.
    pub fn live_biases(&self) -> usize {
        (0..self.out_dim()).filter(|&r| self.mask.row_active(r)).count()
    }

    pub fn total_params(&self) -> usize {
        self.out_dim() * self.in_dim() + self.out_dim()
    }

    pub fn active_params(&self) -> usize {
        self.active_weights() + self.live_biases()
    }

    /// `Y = (W ⊗ Msk)·X + b` for a feature-major batch `X` (`in × batch`).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.in_dim() {
            return Err(Error::Shape {
                op: "masked_affine_forward",
                left: self.weight.shape(),
                right: x.shape(),
            });
        }
        let batch = x.cols();
        let mut y = Matrix::zeros(self.out_dim(), batch);
        let w = self.weight.as_slice();
        let m = self.mask.as_slice();
        let xs = x.as_slice();
        let in_dim = self.in_dim();
        let ys = y.as_mut_slice();
        for i in 0..self.out_dim() {
            let y_row = &mut ys[i * batch..(i + 1) * batch];
            for k in 0..in_dim {
                if m[i * in_dim + k] {
                    let wik = w[i * in_dim + k];
                    let x_row = &xs[k * batch..(k + 1) * batch];
                    for (yv, &xv) in y_row.iter_mut().zip(x_row) {
                        *yv += wik * xv;
                    }
                }
            }
            let b = self.bias[i];
            y_row.iter_mut().for_each(|v| *v += b);
        }
        Ok(y)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(&Matrix::column(x)).map(Matrix::into_vec)
    }

    /// Returns `dX = (W ⊗ Msk)ᵀ·dY` and accumulates `gradW += dY·Xᵀ` over
    /// every entry (masked ones too) and `gradB += Σ_batch dY`.
    pub fn backward(&mut self, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        if x.rows() != self.in_dim() || dy.rows() != self.out_dim() || x.cols() != dy.cols() {
            return Err(Error::Shape {
                op: "masked_affine_backward",
                left: x.shape(),
                right: dy.shape(),
            });
        }
        let batch = x.cols();
        let in_dim = self.in_dim();
        let mut dx = Matrix::zeros(in_dim, batch);
        let w = self.weight.as_slice();
        let m = self.mask.as_slice();
        let xs = x.as_slice();
        let dys = dy.as_slice();
        let dxs = dx.as_mut_slice();
        let out_dim = self.out_dim();
        let gw = self.grad_w.as_mut_slice();
        for i in 0..out_dim {
            let dy_row = &dys[i * batch..(i + 1) * batch];
            for k in 0..in_dim {
                let on = m[i * in_dim + k];
                if on || self.dormant_grads {
                    let x_row = &xs[k * batch..(k + 1) * batch];
                    let mut acc = 0.0;
                    for (&d, &xv) in dy_row.iter().zip(x_row) {
                        acc += d * xv;
                    }
                    gw[i * in_dim + k] += acc;
                }
                if on {
                    let wik = w[i * in_dim + k];
                    let dx_row = &mut dxs[k * batch..(k + 1) * batch];
                    for (dv, &d) in dx_row.iter_mut().zip(dy_row) {
                        *dv += wik * d;
                    }
                }
            }
            self.grad_b[i] += dy_row.iter().sum::<f64>();
        }
        Ok(dx)
    }

    pub fn backward_vec(&mut self, x: &[f64], dy: &[f64]) -> Result<Vec<f64>> {
        self.backward(&Matrix::column(x), &Matrix::column(dy))
            .map(Matrix::into_vec)
    }

    pub fn zero_grad(&mut self) {
        self.grad_w.fill(0.0);
        self.grad_b.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Squared norm of the gradient that an optimizer step would apply
    /// (active weights and live biases only).
    pub fn applied_grad_sq_norm(&self) -> f64 {
        let m = self.mask.as_slice();
        let w: f64 = self
            .grad_w
            .as_slice()
            .iter()
            .zip(m)
            .filter(|(_, &on)| on)
            .map(|(g, _)| g * g)
            .sum();
        let b: f64 = (0..self.out_dim())
            .filter(|&r| self.mask.row_active(r))
            .map(|r| self.grad_b[r] * self.grad_b[r])
            .sum();
        w + b
    }

    pub fn scale_grads(&mut self, s: f64) {
        self.grad_w.scale(s);
        self.grad_b.iter_mut().for_each(|g| *g *= s);
    }

    pub(crate) fn grads_finite(&self) -> bool {
        self.grad_w.is_finite() && self.grad_b.iter().all(|g| g.is_finite())
    }

    pub(crate) fn step_active(&mut self, lr: f64, weight_decay: f64) {
        let cols = self.in_dim();
        for r in 0..self.out_dim() {
            let mut live = false;
            for c in 0..cols {
                if self.mask.get(r, c) {
                    live = true;
                    let w = self.weight[(r, c)];
                    self.weight[(r, c)] = w - lr * (self.grad_w[(r, c)] + weight_decay * w);
                } else {
                    self.weight[(r, c)] = 0.0;
                }
            }
            if live {
                self.bias[r] -= lr * self.grad_b[r];
            } else {
                self.bias[r] = 0.0;
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weight: Matrix,
    mask: Mask,
    bias: Vec<f64>,
}

impl From<MaskedLinear> for LayerRepr {
    fn from(l: MaskedLinear) -> Self {
        LayerRepr {
            weight: l.weight,
            mask: l.mask,
            bias: l.bias,
        }
    }
}

impl TryFrom<LayerRepr> for MaskedLinear {
    type Error = String;

    fn try_from(r: LayerRepr) -> std::result::Result<Self, String> {
        MaskedLinear::from_parts(r.weight, r.mask, r.bias).map_err(|e| e.to_string())
    }
}
