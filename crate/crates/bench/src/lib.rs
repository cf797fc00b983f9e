//! Fixtures shared by the benchmarks.

use lhsynth_core::hlstm::{LmModel, ModelSpec};
use lhsynth_core::numkit::{Activation, Mask, MaskedLinear, Matrix, SeededRng};

/// A `rows × cols` layer with uniform weights and about `density` of its
/// entries active.
pub fn sparse_layer(rows: usize, cols: usize, density: f64, seed: u64) -> MaskedLinear {
    let mut rng = SeededRng::new(seed);
    let w = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let bits: Vec<bool> = (0..rows * cols).map(|_| rng.bernoulli(density)).collect();
    let mut l = MaskedLinear::from_parts(
        Matrix::from_vec(rows, cols, w).expect("sizes agree"),
        Mask::from_fn(rows, cols, |r, c| bits[r * cols + c]),
        vec![0.0; rows],
    )
    .expect("sizes agree");
    l.apply_mask();
    l
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("sizes agree")
}

/// One-cell character model of width `d` with randomly initialised weights.
pub fn model(vocab: usize, d: usize, seed: u64) -> LmModel {
    let spec = ModelSpec {
        vocab,
        d_x: d / 4,
        d_s: d,
        d_h: d,
        hidden_depth: 1,
        stack: 1,
        hidden_activation: Activation::Relu,
        dropout_h: 0.0,
    };
    let mut m = LmModel::zeros(&spec).expect("valid spec");
    m.init_uniform(&mut SeededRng::new(seed));
    m
}

/// `seq_len` steps of `batch` random tokens below `vocab`.
pub fn tokens(seq_len: usize, batch: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = SeededRng::new(seed);
    (0..seq_len).map(|_| (0..batch).map(|_| rng.below(vocab)).collect()).collect()
}
