//! Reverse-mode gradients over batched dense graphs, plus Adam.
//!
//! A [`Tape`] is rebuilt for every batch. Nodes carry whole matrices with the
//! batch along rows, so a full training step of the flows is a few hundred
//! nodes regardless of batch size.

mod adam;
mod check;
mod tape;

pub use adam::{cosine_lr, AdamConfig, AdamState};
pub use check::{grad_check, grad_compare, relative_error, FD_STEP};
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::{logit, sigmoid, softplus, tanh};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("shape mismatch: expected {expected} entries, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
}
