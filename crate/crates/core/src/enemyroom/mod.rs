//! Grid-world benchmark: an agent walks a fixed action sequence through an
//! N x N room while hidden enemies chase and claw it. The task is to predict
//! from the actions and the per-step hit observations whether the agent died.

mod io;
mod metrics;
mod model;
mod predict;
mod train;
mod world;

pub use model::{init_params, policy_features, EnemyRoom, HitCoupling, RoomVars, HIT_LOGIT, POLICY_FEATURES, POLICY_NET};
pub use world::{
    agent_transition, calibrate_theta, chebyshev, generate_dataset, generate_rollouts, simulate, step_within,
    Action, Calibration, CalibrationStep, DatasetSummary, EnemyPolicy, Pos, Rollout, Trajectory, WorldConfig,
    CALIBRATED_THETA, ENEMY_MOVES,
};
pub use metrics::{evaluate, metrics_csv, Confusion, Evaluation, MetricsRow, METRICS_HEADER};
pub use predict::{predict_death, run_filter, Prediction};
pub use train::{
    batch_gradient, bce, BatchGrad, history_csv, theta_hat, train, trajectory_gradient, validation_loss, EpochRecord,
    TrainConfig, TrainOutcome, TrajectoryGrad, HISTORY_HEADER, P_MIN,
};
pub use io::{meta_path, read_dataset, read_meta, write_dataset, DatasetMeta, GENERATOR_VERSION};

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::gradients::GradientError;
use crate::inference::InferenceError;
use crate::neural::NeuralError;
use crate::symbolic::SymbolicError;

#[derive(Debug, Error)]
pub enum EnemyRoomError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { loss: f64, epoch: usize, batch: usize },
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Gradient(#[from] GradientError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, EnemyRoomError>;
