//! Score-function gradient estimation through sampled discrete states.
//!
//! Estimators are packaged as surrogate scalars: only the gradient of a
//! surrogate is meaningful, its value is not.

mod enumerate;
mod experiment;
mod logderiv;
mod recursive;
mod rloo;

pub use enumerate::{exact_expectation_gradient, successors, ExactGradient, Successor};
pub use experiment::{
    categorical_chain, recursive_unbiasedness, rloo_unbiasedness, two_step_chain, EstimatorStats, UnbiasednessReport,
};
pub use logderiv::{log_derivative_check, LogDerivReport};
pub use recursive::{marginal_step, recursive_rloo, recursive_scores, MarginalStep};
pub use rloo::{loo_coefficients, reinforce_surrogate, rloo_coefficients, rloo_surrogate, EstimatorBatch};

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::inference::InferenceError;
use crate::symbolic::SymbolicError;

#[derive(Debug, Error)]
pub enum GradientError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, GradientError>;

#[cfg(test)]
mod tests;
