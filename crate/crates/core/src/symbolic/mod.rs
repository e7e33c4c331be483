//! Cluster-factored symbolic transition models with exact per-cluster
//! conditionals.
//!
//! A [`Schema`] declares finite-domain variables and partitions them into
//! clusters. Each cluster gets a [`ClusterProgram`]: an ordered list of
//! stochastic choice points and deterministic rules with declared reads and
//! writes. A [`Model`] combines the programs with an [`ObservationModel`] and
//! computes, for every observation value, a [`StepPlan`] of groups that can
//! be enumerated exactly and sampled one after another.

mod cluster;
mod engine;
mod schema;
mod validate;

pub use cluster::{
    Access, ChoiceDistribution, ClusterProgram, ConstDist, Factor, FiniteDist, FnRule, LogProbs,
    Model, NoObservation, ObservationModel, ParamBernoulli, ParamCategorical, RuleBody, Scope,
    Step, WeightFn,
};
pub use engine::{ConditionalTable, GroupSpec, GroupTable, StepPlan};
pub use schema::{
    DomainKind, RuleRegistry, Schema, SchemaBuilder, SchemaDocument, SymbolicState, VarDecl,
};
pub use validate::{
    enumerate_joint, validate_clusters, JointMode, JointTable, ValidationInstance,
    ValidationReport, DEFAULT_JOINT_CAP,
};

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::neural::NeuralError;

/// Symbolic values are small integers; booleans use 0/1.
pub type Value = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

#[derive(Debug, Error)]
pub enum SymbolicError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("{step} reads undeclared {access:?}")]
    UndeclaredAccess { step: String, access: Access },
    #[error("value {value} outside the domain of {var}")]
    OutOfDomain { var: String, value: Value },
    #[error("evidence {z:?} impossible from previous state {prev:?}")]
    ImpossibleEvidence { prev: Vec<Value>, z: Option<Value> },
    #[error("variable {0} has an infinite domain; only finite domains are supported")]
    UnsupportedDomain(String),
    #[error("joint support exceeds cap of {0}")]
    CapExceeded(usize),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SymbolicError>;

#[cfg(test)]
mod tests;
