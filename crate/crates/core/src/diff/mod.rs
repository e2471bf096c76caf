//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a flat tape of eagerly-evaluated nodes. Leaves are either
//! named variables (differentiated) or anonymous constants; every other node
//! caches its forward value at insertion so [`Graph::backward`] can run
//! without a separate forward pass. Graphs are rebuilt per optimization step,
//! which keeps the engine simple and matches how the attack and training
//! loops resample their objectives.
//!
//! A `Graph` is single-owner and not shared across tasks; independent graphs
//! may be evaluated concurrently. Tensors are immutable once created.

pub(crate) mod graph;
pub mod special;
mod tensor;

#[cfg(test)]
mod tests;

pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("duplicate leaf name `{0}`")]
    DuplicateLeaf(String),
    #[error("unknown leaf `{0}`")]
    UnknownLeaf(String),
    #[error("invalid node id")]
    InvalidNode,
    #[error("singular matrix in {0}")]
    Singular(&'static str),
}
