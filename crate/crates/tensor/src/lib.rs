//! Minimal dense-tensor engine with tape-based reverse-mode differentiation
//! and a central-difference gradient checker.
//!
//! Spatial tensors are row-major `(channels, height, width)`; token matrices
//! are `(tokens, features)`.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod ops;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
