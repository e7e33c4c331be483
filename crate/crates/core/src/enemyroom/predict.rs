use serde::{Deserialize, Serialize};

use super::model::EnemyRoom;
use super::world::Trajectory;
use super::Result;
use crate::diffcore::Tape;
use crate::inference::{rbpf_step, ParticleBelief};
use crate::neural::{FrozenContext, NeuralContext, ParamStore};
use crate::stochastics::RngKey;

/// Death probability of one trajectory with filter diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    pub std_error: f64,
    /// Every particle hit impossible evidence; `probability` is then the
    /// unweighted dead fraction.
    pub degenerate: bool,
    /// ESS after each step, starting with `t = 0`.
    pub ess: Vec<f64>,
    pub log_likelihood: f64,
}

impl Prediction {
    pub fn final_ess(&self) -> f64 {
        self.ess.last().copied().unwrap_or(0.0)
    }
}

/// Runs the filter over a whole trajectory. The initial draw uses
/// `key.split(0)`, step `t` uses `key.split(t)`.
pub fn run_filter<'t>(
    room: &EnemyRoom,
    traj: &Trajectory,
    n_particles: usize,
    ctx: &dyn NeuralContext<'t>,
    tape: Option<&'t Tape>,
    key: &RngKey,
) -> Result<ParticleBelief<'t>> {
    room.check_trajectory(traj)?;
    let init = room.initial(traj.start());
    let mut belief =
        ParticleBelief::sample_initial(room.model.schema(), &init, n_particles, key.split(0), tape, false)?;
    let exos = EnemyRoom::exos(traj);
    let zs = EnemyRoom::observations(traj);
    for (t, (exo, z)) in exos.iter().zip(&zs).enumerate() {
        belief = rbpf_step(belief, &room.model, exo, *z, ctx, key.split(t as u64 + 1))?;
    }
    Ok(belief)
}

/// Self-normalised probability that the agent is dead at `T`. Death is
/// absorbing, so this is also the probability of dying at any `t <= T`.
pub fn predict_death(
    room: &EnemyRoom,
    store: &ParamStore,
    traj: &Trajectory,
    n_particles: usize,
    key: &RngKey,
) -> Result<Prediction> {
    let ctx = FrozenContext::new(store);
    let belief = run_filter(room, traj, n_particles, &ctx, None, key)?;
    let dead = |i: usize| f64::from(u8::from(room.is_dead(&belief.particles[i].values)));
    match belief.query_expectation(|i, _| dead(i)) {
        Ok(q) => Ok(Prediction {
            probability: q.mean,
            std_error: q.std_error,
            degenerate: false,
            ess: belief.ess_trace.clone(),
            log_likelihood: belief.log_likelihood_estimate(),
        }),
        Err(crate::inference::InferenceError::Degenerate) => {
            let n = belief.len() as f64;
            let p = (0..belief.len()).map(dead).sum::<f64>() / n;
            Ok(Prediction {
                probability: p,
                std_error: (p * (1.0 - p) / n).sqrt(),
                degenerate: true,
                ess: belief.ess_trace.clone(),
                log_likelihood: f64::NEG_INFINITY,
            })
        }
        Err(e) => Err(e.into()),
    }
}
