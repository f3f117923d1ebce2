//! Tensors, reverse-mode differentiation, and the CTNS file format.

pub mod ctns;
mod tape;
mod tensor;

use thiserror::Error;

pub use tape::{masked_lse, ElementwiseOp, Gradients, Tape, Var};
pub use tensor::{matmul, Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: unsupported rank for dims {dims:?}")]
    Rank { op: &'static str, dims: Vec<usize> },
    #[error("dims {dims:?} do not match data length {len}")]
    LengthMismatch { dims: Vec<usize>, len: usize },
    #[error("invalid dims {dims:?}")]
    InvalidDims { dims: Vec<usize> },
    #[error("{op}: value {value} at index {index} outside domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: degenerate input at row {row}")]
    Degenerate { op: &'static str, row: usize },
    #[error("{op}: expected {expected} operands, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward root must be scalar, got dims {dims:?}")]
    NonScalarRoot { dims: Vec<usize> },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
}
