use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::EnemyRoom;
use super::predict::{predict_death, Prediction};
use super::world::Trajectory;
use super::Result;
use crate::neural::ParamStore;
use crate::stochastics::RngKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// Mean of the two per-class recalls; `None` when a class is absent.
    pub fn balanced_accuracy(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        if pos == 0 || neg == 0 {
            return None;
        }
        Some(0.5 * (self.tp as f64 / pos as f64 + self.tn as f64 / neg as f64))
    }

    /// F1 of the positive class; `None` when there are no positives at all,
    /// predicted or actual.
    pub fn f1(&self) -> Option<f64> {
        let d = 2 * self.tp + self.fp + self.fn_;
        (d > 0).then(|| 2.0 * self.tp as f64 / d as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: Confusion,
    pub balanced_accuracy: Option<f64>,
    pub f1: Option<f64>,
    /// Mean final-step ESS; `None` for an empty dataset.
    pub mean_ess: Option<f64>,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    pub fn from_predictions(predictions: Vec<Prediction>, labels: &[bool], threshold: f64) -> Self {
        let confusion = Confusion::from_pairs(
            predictions
                .iter()
                .zip(labels)
                .map(|(p, &y)| (p.probability >= threshold, y)),
        );
        let mean_ess = (!predictions.is_empty())
            .then(|| predictions.iter().map(Prediction::final_ess).sum::<f64>() / predictions.len() as f64);
        Self {
            balanced_accuracy: confusion.balanced_accuracy(),
            f1: confusion.f1(),
            confusion,
            mean_ess,
            predictions,
        }
    }
}

/// Classifies each trajectory by `predict_death >= threshold`. Trajectory
/// `i` is filtered with `key.split(i)`.
pub fn evaluate(
    room: &EnemyRoom,
    store: &ParamStore,
    data: &[Trajectory],
    threshold: f64,
    n_particles: usize,
    key: &RngKey,
) -> Result<Evaluation> {
    let predictions = data
        .par_iter()
        .enumerate()
        .map(|(i, traj)| predict_death(room, store, traj, n_particles, &key.split(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = data.iter().map(|t| t.label).collect();
    Ok(Evaluation::from_predictions(predictions, &labels, threshold))
}

/// One row of a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub config: String,
    pub split: String,
    pub evaluation: Evaluation,
}

pub const METRICS_HEADER: [&str; 9] = [
    "config",
    "split",
    "balanced_accuracy",
    "f1",
    "tp",
    "fp",
    "tn",
    "fn",
    "mean_ess",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl MetricsRow {
    pub fn record(&self) -> [String; 9] {
        let e = &self.evaluation;
        let c = e.confusion;
        [
            self.config.clone(),
            self.split.clone(),
            opt(e.balanced_accuracy),
            opt(e.f1),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
            opt(e.mean_ess),
        ]
    }
}

/// Metrics CSV text with a header line.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}
