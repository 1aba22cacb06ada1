//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Graphs are built per forward pass and only support the handful of ops the
//! prototype head needs. Broadcasting is limited to scalar-with-tensor.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use graph::{ElementwiseOp, Graph, ReduceOp, Var};
pub(crate) use graph::matmul_raw;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
