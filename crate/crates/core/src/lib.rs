//! Neurosymbolic Markov models: differentiable particle inference over
//! factorised symbolic state, with a grid-world benchmark.

pub mod cli;
pub mod diffcore;
pub mod enemyroom;
pub mod gradients;
pub mod inference;
pub mod neural;
pub mod stochastics;
pub mod symbolic;
