//! Dense `f64` tensors, a counter-based PRNG, tape-based reverse-mode
//! gradients and the on-disk tensor container.

mod graph;
mod rng;
mod tensor;
pub mod tensor_file;

pub use graph::{Gradients, Graph, PairRotation, Var, RMS_EPS};
pub use rng::{purpose, Rng};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("gradient requested for non-scalar loss with dims {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
