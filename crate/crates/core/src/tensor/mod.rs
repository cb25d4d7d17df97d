//! Dense `f64` tensors with a small eager reverse-mode tape.
//!
//! Broadcasting is deliberately narrow: binary ops accept equal shapes or a
//! single-element operand, and bias addition has its own op.

mod dense;
mod gradcheck;
mod graph;
mod params;

pub use dense::Tensor;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};

pub(crate) use graph::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: axis {axis} is invalid for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
}
