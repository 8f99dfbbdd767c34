//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Graph`] as they execute; [`Graph::backward`]
//! walks the tape once in reverse. Everything runs in double precision so
//! analytic gradients can be checked against central finite differences.

mod graph;
pub mod gradcheck;
mod params;
mod tensor;

pub use graph::{permute_indices, Gradients, Graph, Var, GATHER_ZERO};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("parameter `{0}` already registered")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, AutogradError>;
