//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The op set is exactly what the masking frontend needs: dense linear
//! algebra, smooth activations, layer norm, causal depthwise convolution,
//! masked softmax, element-wise power with gradients for both base and
//! exponent, a mask floor, and [`Graph::stop_gradient`].

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_values, GradReport};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: value {value} at element {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

#[cfg(test)]
mod tests;
