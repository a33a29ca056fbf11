//! Differentiable tensor substrate: a define-by-run tape with reverse-mode
//! gradients and a central-difference gradient verifier.

mod gradcheck;
mod graph;
mod ops;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, Stencil};
pub use graph::{Gradients, Graph, OpKind, Var, DEFAULT_LEAKY_SLOPE, INSTANCE_NORM_EPS};
pub use scalar::Scalar;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("invalid shape {shape:?}: dimensions must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: argument out of domain at index {index} (value {value})")]
    Domain { op: &'static str, index: usize, value: f64 },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("gradient check: non-finite value for input {input}, coordinate {index}")]
    CheckNonFinite { input: usize, index: usize },
}
