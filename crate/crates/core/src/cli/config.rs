use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CliError, Result};
use crate::enemyroom::{TrainConfig, WorldConfig};

/// Everything a command may read from a config file. Every field has a
/// default, so an empty file is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of training, evaluation and the check suites. Data generation
    /// uses `world.seed`.
    pub seed: u64,
    /// Trajectories written by `gen-data`.
    pub count: usize,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub calibration: CalibrationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 5000,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_particles: usize,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            threshold: 0.5,
        }
    }
}

/// Bisection of `theta*` against a target death rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub target: f64,
    pub count: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            target: 0.172,
            count: 5000,
            tol: 0.002,
            max_iter: 30,
        }
    }
}

impl RunConfig {
    /// TOML unless the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data serialises")
    }
}
