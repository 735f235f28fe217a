//! Tape-based reverse-mode differentiation over dense tensors.

pub mod check;
mod graph;
mod tensor;

pub(crate) use graph::softmax_into;
pub use graph::{Graph, Reduction, Unary, Var, KURTOSIS_MIN_VARIANCE, KURTOSIS_STD_GUARD};
pub use tensor::Tensor;
