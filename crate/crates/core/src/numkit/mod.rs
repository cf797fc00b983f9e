//! Deterministic dense kernels and the masked affine layer every
//! grow/prune algorithm operates on.

mod activation;
mod masked;
mod matrix;
mod optim;
mod rng;
mod select;

pub use activation::{sigmoid, Activation};
pub use masked::{Mask, MaskedLinear};
pub use matrix::{matmul, matmul_acc, Matrix};
pub use optim::{clip_factor, sgd_step};
pub use rng::{RngState, SeededRng};
pub use select::{ceil_count, percentile_threshold, select_k, Direction};
