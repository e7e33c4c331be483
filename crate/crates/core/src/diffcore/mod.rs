//! Reverse-mode automatic differentiation over scalars and dense vectors.
//!
//! A [`Tape`] records primitive operations in topological order; a [`Var`] is
//! a cheap copyable handle onto one recorded node. Values live in a single
//! flat arena so that scalar-heavy graphs (log-probabilities of many particles)
//! stay small, while vector nodes cover the dense layers of small MLPs.
//!
//! Tapes are single-writer (interior mutability through `RefCell`) and are
//! meant to be created per training step and then dropped.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{logsumexp, Gradients, Prim, Shape, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("vars from different tapes")]
    ForeignVar,
}

pub type Result<T> = std::result::Result<T, DiffError>;
