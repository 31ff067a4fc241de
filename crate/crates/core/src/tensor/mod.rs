//! Dense 64-bit tensors with a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain value (shape + row-major data). Differentiable
//! computation happens on a [`Graph`], which records every operation on a
//! tape and replays it backwards. Trainable state lives in a
//! [`ParamStore`]; each [`Parameter`] carries a `frozen` flag that the
//! optimizer honours.

mod array;
mod graph;
mod kernels;
mod param;

pub use array::{Tensor, TensorError};
pub use graph::{Graph, Var};
pub use kernels::{gelu, gelu_grad};
pub use param::{ParamId, ParamStore, Parameter};

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-12;
