//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Only scalar-with-tensor broadcasting is supported; row-vector addition
//! and layer normalization are explicit ops with their own backward rules.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use graph::{
    log_sigmoid, log_softmax_in_place, sigmoid, ElementwiseKind, Graph, Operand, Segment, Var,
};
pub(crate) use graph::gemm;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("masked loss has no selected positions")]
    EmptyMask,
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

#[cfg(test)]
mod tests;
