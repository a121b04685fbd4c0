//! Dense tensors, reverse-mode differentiation, AdamW and gradient checking.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

use alloc::string::String;
use alloc::vec::Vec;

pub use gradcheck::{grad_check, grad_check_against, REL_ERR_FLOOR};
pub use optim::{AdamW, AdamWConfig};
pub use params::{uniform, xavier_uniform, ParamStore};
pub use tape::{Binding, Gradients, SparseMatrix, Tape, Var};
pub use tensor::{log_softmax_slice, softmax_slice, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NeuralError {
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value during evaluation")]
    NonFinite,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}
