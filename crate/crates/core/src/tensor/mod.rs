//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//!
//! The engine is deliberately small: explicit shapes, no implicit
//! broadcasting beyond the documented per-op rules, contiguous storage, and
//! a single-writer tape. One training step is externally single-threaded and
//! bit-deterministic for a fixed seed.

mod graph;
mod scalar;
mod tensor;

pub mod gradcheck;
pub mod kernels;

pub use graph::{Graph, GraphCtx, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor construction and graph ops.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("parameter error in {op}: {msg}")]
    Parameter { op: &'static str, msg: String },
    #[error("contract error in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Self::Dimension { op, msg: msg.into() }
    }
    pub(crate) fn param(op: &'static str, msg: impl Into<String>) -> Self {
        Self::Parameter { op, msg: msg.into() }
    }
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Self::Contract { op, msg: msg.into() }
    }
}
