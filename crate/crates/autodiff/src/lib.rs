//! Reverse-mode automatic differentiation over small dense CPU tensors.
//!
//! A [`Graph`] records every operation of one forward pass as a node on a
//! tape; [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar output with respect to every node that needs one.
//! Parameters live outside the tape in a [`ParamSet`] so that the same
//! weights can be bound into many short-lived graphs.
//!
//! The operation set is deliberately narrow: dense matmul, 3D convolution
//! via im2col, grouped (windowed or cross) multi-head attention, layer
//! normalisation, a handful of smooth pointwise nonlinearities and the
//! losses needed for contrastive and multi-label training.

mod float;
mod gemm;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use float::Float;
pub use graph::{AttentionGroup, AttentionLayout, Gradients, Graph, Unary, Var};
pub use params::{ParamEntry, ParamId, ParamSet};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ShapeError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{name}` expects shape {expected:?}, got {actual:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}
