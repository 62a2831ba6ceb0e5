//! Dense tensors, a reverse-mode differentiation tape, and the FFT.
//!
//! Everything downstream builds its forward pass from [`Graph`] operations
//! and gets gradients for free. Values are 64-bit and row-major; shapes must
//! match exactly except for the explicit row, scalar and batch broadcasts.

mod complex;
mod gradcheck;
mod graph;
mod tensor;

use thiserror::Error;

pub use complex::ComplexTensor;
pub use gradcheck::{gradient_check, gradient_check_many, GradCheckReport};
pub use graph::{sigmoid, softplus, Graph, Unary, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} ({context})")]
    InvalidShape { context: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward needs a one-element root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward already ran on this graph; reset adjoints first")]
    BackwardAlreadyRun,
    #[error("non-finite value in {context} at input {input}, coordinate {coordinate}")]
    NonFinite {
        context: &'static str,
        input: usize,
        coordinate: usize,
    },
    #[error("{0}")]
    InvalidArgument(String),
}
