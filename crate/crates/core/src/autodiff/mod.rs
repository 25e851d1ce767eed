//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] replays
//! them in reverse and returns per-[`Parameter`] gradients. Parameters own
//! their Adam moments so an optimizer step is a pure function of the
//! parameter and its accumulated gradient.

mod gradcheck;
pub mod kernels;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, BlockReport, GradCheckReport, REL_ERROR_FLOOR};
pub use param::{adam_step, Adam, AdamState, ParamId, Parameter};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("non-finite value at tape node {node}")]
    NumericInstability { node: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
}
