//! Sequential inference: the differentiable Rao-Blackwellised particle filter,
//! a bootstrap particle filter baseline, and exact forward oracles.

mod belief;
mod bootstrap;
mod exact;
mod hmm;
mod rbpf;

pub use belief::{effective_sample_size, InitialDistribution, ParticleBelief, QueryEstimate};
pub use bootstrap::{
    bootstrap_pf_step, resample_multinomial, resample_systematic, BootstrapBelief, Resampling,
};
pub use exact::{exact_forward_model, ModelForward};
pub use hmm::{exact_forward_hmm, HmmForward, HmmSpec};
pub use rbpf::{prior_transition, rao_blackwell_filtered, rbpf_step};

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::symbolic::SymbolicError;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("degenerate filter: every particle has zero weight")]
    Degenerate,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;
