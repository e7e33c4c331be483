use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, Evaluation};
use super::model::{EnemyRoom, HIT_LOGIT};
use super::predict::run_filter;
use super::world::Trajectory;
use super::{EnemyRoomError, Result};
use crate::diffcore::{Tape, Var};
use crate::gradients::{rloo_surrogate, EstimatorBatch};
use crate::neural::{adam_step, AdamConfig, ParamStore, TapeContext};
use crate::stochastics::{sigmoid, RngKey};

/// Predicted probabilities are clamped to `[P_MIN, 1 - P_MIN]` inside the
/// cross-entropy.
pub const P_MIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_particles: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Weight of the per-step negative log-evidence added to the
    /// cross-entropy.
    pub evidence_weight: f64,
    /// Stop after this many epochs without a better validation loss.
    pub patience: Option<usize>,
    pub val_particles: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            batch_size: 50,
            epochs: 100,
            lr: 1e-3,
            evidence_weight: 1.0,
            patience: None,
            val_particles: 1000,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EnemyRoomError::Config(m.to_string()));
        if self.n_particles < 2 || self.val_particles < 2 {
            return bad("particle counts must be at least 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.evidence_weight >= 0.0 && self.evidence_weight.is_finite()) {
            return bad("evidence_weight must be finite and non-negative");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Loss of one trajectory and the gradient of its surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGrad {
    pub loss: f64,
    pub probability: f64,
    pub gradient: BTreeMap<String, Vec<f64>>,
    pub ess: f64,
    pub degenerate: bool,
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_MIN, 1.0 - P_MIN)
}

/// Binary cross-entropy of a clamped probability.
pub fn bce(p: f64, label: bool) -> f64 {
    let p = clamp_p(p);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Per-trajectory objective `BCE(p) - lambda/T log Z` where `p` is the
/// filtered death probability and `Z` the filter's evidence estimate.
///
/// Both terms are differentiated pathwise through the exact evidence of
/// every particle. Sampling is accounted for with an RLOO score term whose
/// per-particle value is `N dL/dLW_i`, the particle's first-order share of
/// the loss.
pub fn trajectory_gradient(
    room: &EnemyRoom,
    store: &ParamStore,
    traj: &Trajectory,
    cfg: &TrainConfig,
    key: &RngKey,
) -> Result<TrajectoryGrad> {
    let tape = Tape::new();
    let ctx = TapeContext::new(&tape, store);
    let belief = run_filter(room, traj, cfg.n_particles, &ctx, Some(&tape), key)?;
    let n = belief.len();
    let ess = belief.ess_trace.last().copied().unwrap_or(0.0);
    let dead: Vec<f64> = (0..n)
        .map(|i| f64::from(u8::from(room.is_dead(&belief.particles[i].values))))
        .collect();
    let live: Vec<usize> = (0..n).filter(|&i| belief.is_alive(i)).collect();
    if live.is_empty() {
        let p = dead.iter().sum::<f64>() / n as f64;
        return Ok(TrajectoryGrad {
            loss: bce(p, traj.label),
            probability: p,
            gradient: BTreeMap::new(),
            ess,
            degenerate: true,
        });
    }

    // Evidence Vars with their values pinned to the recorded log-weights;
    // constant terms that never reached the tape only shift the value.
    let lw: Vec<Var<'_>> = live
        .iter()
        .map(|&i| {
            let v = belief.log_evidence(i).expect("tape attached");
            v + tape.scalar(belief.log_weights[i] - v.value())
        })
        .collect();
    let lw = tape.concat(&lw);
    let log_w = lw.log_softmax();
    let w_hat = log_w.values().iter().map(|x| x.exp()).collect::<Vec<_>>();
    let d_live: Vec<f64> = live.iter().map(|&i| dead[i]).collect();
    let p_var = log_w.exp().dot(tape.vector(&d_live));
    let p = p_var.value();
    let t_len = traj.t as f64;
    let lambda = cfg.evidence_weight / t_len;

    let clamped = p < P_MIN || p > 1.0 - P_MIN;
    let (bce_var, g) = if clamped {
        (tape.scalar(bce(p, traj.label)), 0.0)
    } else if traj.label {
        (-p_var.ln(), -1.0 / p)
    } else {
        (-(tape.scalar(1.0) - p_var).ln(), 1.0 / (1.0 - p))
    };
    let log_z = lw.logsumexp() - tape.scalar((n as f64).ln());
    let loss_var = bce_var + log_z.scale(-lambda);
    let loss = loss_var.value();
    if !loss.is_finite() {
        return Err(EnemyRoomError::NonFinite {
            loss,
            epoch: 0,
            batch: 0,
        });
    }

    let mut f_values = vec![0.0; n];
    for (k, &i) in live.iter().enumerate() {
        let dl = g * w_hat[k] * (d_live[k] - p) - lambda * w_hat[k];
        f_values[i] = n as f64 * dl;
    }
    let scores = (0..n).map(|i| belief.log_score(i).expect("tape attached")).collect();
    let score_term = rloo_surrogate(&EstimatorBatch::new(f_values, scores))?;
    let surrogate = loss_var + score_term;
    let gradient = tape.backward(surrogate)?.params(&tape);
    Ok(TrajectoryGrad {
        loss,
        probability: p,
        gradient,
        ess,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub loss: f64,
    /// Mean final-step ESS of the batch's filters.
    pub ess: f64,
    pub gradient: BTreeMap<String, Vec<f64>>,
}

/// Mean gradient over a batch, summed in index order so that the result
/// does not depend on the thread count.
pub fn batch_gradient(
    room: &EnemyRoom,
    store: &ParamStore,
    batch: &[&Trajectory],
    cfg: &TrainConfig,
    key: &RngKey,
) -> Result<BatchGrad> {
    let parts = batch
        .par_iter()
        .enumerate()
        .map(|(i, traj)| trajectory_gradient(room, store, traj, cfg, &key.split(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut loss = 0.0;
    let mut ess = 0.0;
    for part in &parts {
        loss += part.loss * scale;
        ess += part.ess * scale;
        for (name, g) in &part.gradient {
            let acc = total.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x * scale;
            }
        }
    }
    Ok(BatchGrad {
        loss,
        ess,
        gradient: total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_balanced_accuracy: Option<f64>,
    pub val_f1: Option<f64>,
    /// Mean final-step ESS over the epoch's training filters.
    pub mean_ess: f64,
    pub theta_hat: f64,
    /// Selection criterion; not part of the history CSV.
    #[serde(skip)]
    pub val_loss: f64,
}

pub const HISTORY_HEADER: [&str; 6] = ["epoch", "loss", "val_balanced_accuracy", "val_f1", "mean_ess", "theta_hat"];

pub fn history_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    let mut out = HISTORY_HEADER.join(",");
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.loss,
            opt(r.val_balanced_accuracy),
            opt(r.val_f1),
            r.mean_ess,
            r.theta_hat
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss (the initial
    /// parameters count as epoch 0).
    pub store: ParamStore,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub initial: Evaluation,
}

/// Mean validation objective: cross-entropy plus the weighted per-step
/// negative log-evidence, matching the training loss.
pub fn validation_loss(eval: &Evaluation, data: &[Trajectory], evidence_weight: f64) -> f64 {
    let n = data.len().max(1) as f64;
    eval.predictions
        .iter()
        .zip(data)
        .map(|(p, t)| {
            let nll = if p.log_likelihood.is_finite() {
                -p.log_likelihood / t.t as f64
            } else {
                // all particles ruled out: charge a large but finite penalty
                1e3
            };
            bce(p.probability, t.label) + evidence_weight * nll
        })
        .sum::<f64>()
        / n
}

pub fn theta_hat(store: &ParamStore) -> Result<f64> {
    Ok(sigmoid(store.scalar(HIT_LOGIT)?))
}

/// Adam on shuffled mini-batches. Epoch `k` shuffles with `key.split(1).split(k)`,
/// batch `b` filters with `key.split(2).split(k).split(b)` and validation
/// uses `key.split(3)` throughout so that epochs are compared on the same
/// particle draws.
pub fn train(
    room: &EnemyRoom,
    mut store: ParamStore,
    train_set: &[Trajectory],
    val_set: &[Trajectory],
    cfg: &TrainConfig,
    key: &RngKey,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() && cfg.epochs > 0 {
        return Err(EnemyRoomError::Config("empty training set".into()));
    }
    for t in train_set.iter().chain(val_set) {
        room.check_trajectory(t)?;
    }
    let vkey = key.split(3);
    let run_val = |s: &ParamStore| -> Result<(Evaluation, f64)> {
        let e = evaluate(room, s, val_set, cfg.threshold, cfg.val_particles, &vkey)?;
        let l = validation_loss(&e, val_set, cfg.evidence_weight);
        Ok((e, l))
    };
    let (initial, initial_loss) = run_val(&store)?;
    let mut best = (initial_loss, 0usize, store.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        key.split(1).split(epoch as u64).stream().shuffle(&mut order);
        let mut loss = 0.0;
        let mut ess = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &train_set[i]).collect();
            let bkey = key.split(2).split(epoch as u64).split(b as u64);
            let bg = batch_gradient(room, &store, &batch, cfg, &bkey).map_err(|e| match e {
                EnemyRoomError::NonFinite { loss, .. } => EnemyRoomError::NonFinite { loss, epoch, batch: b },
                e => e,
            })?;
            loss += bg.loss * batch.len() as f64;
            ess += bg.ess * batch.len() as f64;
            adam_step(&mut store, &bg.gradient, adam)?;
        }
        loss /= train_set.len() as f64;
        ess /= train_set.len() as f64;
        let (val, val_loss) = run_val(&store)?;
        let rec = EpochRecord {
            epoch,
            loss,
            val_balanced_accuracy: val.balanced_accuracy,
            val_f1: val.f1,
            mean_ess: ess,
            theta_hat: theta_hat(&store)?,
            val_loss,
        };
        on_epoch(&rec);
        history.push(rec);
        if val_loss < best.0 {
            best = (val_loss, epoch, store.clone());
        }
        if cfg.patience.is_some_and(|p| epoch - best.1 >= p) {
            break;
        }
    }
    Ok(TrainOutcome {
        store: best.2,
        best_epoch: best.1,
        history,
        initial,
    })
}
