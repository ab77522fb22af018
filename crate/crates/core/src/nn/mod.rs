//! Dense tensors, MLPs, a reverse-mode tape and gradient checking.

mod gradcheck;
mod mlp;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, Coverage};
pub use mlp::{Activation, Dense, Mlp};
pub use optim::{Adam, AdamConfig, Optimizer, Sgd};
pub use tape::{masked_softmax_row, rodrigues, sigmoid, Gradients, SparseMatrix, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("loss must be a 1x1 node, got {shape:?}")]
    NotScalarLoss { shape: [usize; 2] },
    #[error("non-finite {0}")]
    NonFiniteValue(&'static str),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}
