//! Splittable counter-based randomness and finite distributions whose
//! log-probabilities live on a [`Tape`](crate::diffcore::Tape).

mod dist;
mod rng;

pub use dist::{sample_index, sigmoid, softmax, BernoulliDist, CategoricalDist};
pub use rng::{RngKey, RngStream};

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StochError {
    #[error("label outside support: {0}")]
    Domain(String),
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, StochError>;
