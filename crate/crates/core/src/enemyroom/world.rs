use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EnemyRoomError, Result};
use crate::stochastics::RngKey;

/// Grid coordinates; interior cells are `1..=n` on both axes.
pub type Pos = (i64, i64);

/// Agent actions, one cardinal step each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn delta(self) -> Pos {
        match self {
            Action::Up => (0, 1),
            Action::Down => (0, -1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
        })
    }
}

impl FromStr for Action {
    type Err = EnemyRoomError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up" => Ok(Action::Up),
            "down" => Ok(Action::Down),
            "left" => Ok(Action::Left),
            "right" => Ok(Action::Right),
            _ => Err(EnemyRoomError::Config(format!("unknown action {s:?}"))),
        }
    }
}

/// Enemy moves in the order N, NE, E, SE, S, SW, W, NW.
pub const ENEMY_MOVES: [Pos; 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

/// One step by `delta`; a move that would leave the interior is a bump and
/// the position is unchanged.
pub fn step_within(pos: Pos, delta: Pos, n: i64) -> Pos {
    let next = (pos.0 + delta.0, pos.1 + delta.1);
    if (1..=n).contains(&next.0) && (1..=n).contains(&next.1) {
        next
    } else {
        pos
    }
}

pub fn agent_transition(pos: Pos, action: Action, n: i64) -> Pos {
    step_within(pos, action.delta(), n)
}

pub fn chebyshev(a: Pos, b: Pos) -> i64 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// Ground-truth enemy behaviour of the surrogate world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnemyPolicy {
    /// Move to a cell minimising `|chebyshev(cell, agent) - 1|`, ties broken
    /// uniformly.
    #[default]
    Chase,
    /// Uniform over the eight moves.
    Random,
}

impl EnemyPolicy {
    /// Candidate destinations from `enemy` given the agent's new position.
    pub fn candidates(self, enemy: Pos, agent: Pos, n: i64) -> Vec<Pos> {
        let all = ENEMY_MOVES.iter().map(|&d| step_within(enemy, d, n));
        match self {
            EnemyPolicy::Random => all.collect(),
            EnemyPolicy::Chase => {
                let score = |p: Pos| (chebyshev(p, agent) - 1).abs();
                let best = all.clone().map(score).min().expect("eight moves");
                all.filter(|&p| score(p) == best).collect()
            }
        }
    }
}

/// Hit probability calibrated so that (N=10, T=10, E=1) kills the agent in
/// about 17.2% of trajectories; see `configs/calibration.log`.
pub const CALIBRATED_THETA: f64 = 0.4140625;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n: i64,
    pub t: usize,
    pub e: usize,
    pub theta_star: f64,
    pub policy: EnemyPolicy,
    pub initial_hp: i64,
    pub damage_die: i64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n: 10,
            t: 10,
            e: 1,
            theta_star: CALIBRATED_THETA,
            policy: EnemyPolicy::Chase,
            initial_hp: 12,
            damage_die: 4,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn new(n: i64, t: usize, e: usize) -> Self {
        Self {
            n,
            t,
            e,
            ..Self::default()
        }
    }

    /// `E = 0` is accepted as a degenerate variant without enemies.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EnemyRoomError::Config(m));
        if self.n < 3 {
            return bad(format!("grid size {} < 3", self.n));
        }
        if self.t < 1 {
            return bad("horizon must be at least 1".into());
        }
        if self.e > 2 {
            return bad(format!("{} enemies, at most 2 supported", self.e));
        }
        if !(self.theta_star > 0.0 && self.theta_star < 1.0) {
            return bad(format!("theta* = {} outside (0, 1)", self.theta_star));
        }
        if self.initial_hp < 1 || self.damage_die < 1 {
            return bad("hit points and damage die must be positive".into());
        }
        Ok(())
    }

    /// Short label such as `10_10_1`.
    pub fn label(&self) -> String {
        format!("{}_{}_{}", self.n, self.t, self.e)
    }
}

/// One benchmark sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub n: i64,
    pub t: usize,
    pub e: usize,
    pub agent_start: [i64; 2],
    pub actions: Vec<Action>,
    pub hit_obs: Vec<bool>,
    pub label: bool,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if self.actions.len() != self.t || self.hit_obs.len() != self.t {
            return Err(EnemyRoomError::Config(format!(
                "trajectory of length {} has {} actions and {} observations",
                self.t,
                self.actions.len(),
                self.hit_obs.len()
            )));
        }
        let [x, y] = self.agent_start;
        if !(1..=self.n).contains(&x) || !(1..=self.n).contains(&y) {
            return Err(EnemyRoomError::Config(format!("start ({x}, {y}) outside the grid")));
        }
        Ok(())
    }

    pub fn start(&self) -> Pos {
        (self.agent_start[0], self.agent_start[1])
    }
}

/// A simulated trajectory with the hidden ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// Agent positions at `t = 0..=T`.
    pub agent: Vec<Pos>,
    /// `enemies[e][t]` for `t = 0..=T`.
    pub enemies: Vec<Vec<Pos>>,
    /// `damage[t-1]`: total damage dealt at step `t`.
    pub damage: Vec<i64>,
    /// Hit points at `t = 0..=T`, floored at 0.
    pub hp: Vec<i64>,
}

fn below(key: &RngKey, idx: u64, n: usize) -> usize {
    ((key.uniform(idx) * n as f64) as usize).min(n - 1)
}

/// Simulates one trajectory. Every random quantity of step `t` and enemy `e`
/// is drawn from `key.split(3).split(t).split(e)`, so trajectories with
/// different `theta*` share their movement and their hit uniforms.
pub fn simulate(cfg: &WorldConfig, key: &RngKey) -> Rollout {
    let n = cfg.n;
    let cells = (n * n) as usize;
    let cell = |i: usize| (1 + (i as i64 % n), 1 + (i as i64 / n));
    let start = cell(below(&key.split(0), 0, cells));
    let ak = key.split(1);
    let actions: Vec<Action> = (0..cfg.t)
        .map(|t| Action::ALL[below(&ak, t as u64, 4)])
        .collect();
    let mut enemies: Vec<Vec<Pos>> = (0..cfg.e)
        .map(|e| {
            // uniform over the cells other than the agent's start
            let i = below(&key.split(2).split(e as u64), 0, cells - 1);
            let s = (start.1 - 1) * n + (start.0 - 1);
            let i = if i as i64 >= s { i + 1 } else { i };
            vec![cell(i)]
        })
        .collect();
    let mut agent = vec![start];
    let mut hp = vec![cfg.initial_hp];
    let mut damage = Vec::with_capacity(cfg.t);
    let mut hit_obs = Vec::with_capacity(cfg.t);
    for t in 1..=cfg.t {
        let a = agent_transition(agent[t - 1], actions[t - 1], n);
        agent.push(a);
        let alive = hp[t - 1] > 0;
        let mut dealt = 0;
        let mut hit = false;
        for (e, path) in enemies.iter_mut().enumerate() {
            let k = key.split(3).split(t as u64).split(e as u64);
            let options = cfg.policy.candidates(path[t - 1], a, n);
            let p = options[below(&k, 0, options.len())];
            path.push(p);
            if alive && chebyshev(p, a) == 1 && k.uniform(1) < cfg.theta_star {
                hit = true;
                dealt += 1 + below(&k, 2, cfg.damage_die as usize) as i64;
            }
        }
        damage.push(dealt);
        hp.push((hp[t - 1] - dealt).max(0));
        hit_obs.push(hit);
    }
    let label = *hp.last().expect("initial hp") == 0;
    Rollout {
        trajectory: Trajectory {
            n,
            t: cfg.t,
            e: cfg.e,
            agent_start: [start.0, start.1],
            actions,
            hit_obs,
            label,
        },
        agent,
        enemies,
        damage,
        hp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub count: usize,
    pub deaths: usize,
    pub death_rate: f64,
    /// Fraction of steps with a hit observed.
    pub hit_rate: f64,
}

impl DatasetSummary {
    pub fn of(data: &[Trajectory]) -> Self {
        let deaths = data.iter().filter(|t| t.label).count();
        let steps: usize = data.iter().map(|t| t.t).sum();
        let hits: usize = data.iter().map(|t| t.hit_obs.iter().filter(|&&h| h).count()).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            count: data.len(),
            deaths,
            death_rate: ratio(deaths, data.len()),
            hit_rate: ratio(hits, steps),
        }
    }
}

/// Trajectory `i` is simulated with `key.split(i)`; results do not depend on
/// the thread count.
pub fn generate_rollouts(cfg: &WorldConfig, count: usize, key: &RngKey) -> Result<Vec<Rollout>> {
    cfg.validate()?;
    Ok((0..count)
        .into_par_iter()
        .map(|i| simulate(cfg, &key.split(i as u64)))
        .collect())
}

pub fn generate_dataset(cfg: &WorldConfig, count: usize, key: &RngKey) -> Result<(Vec<Trajectory>, DatasetSummary)> {
    let data: Vec<Trajectory> = generate_rollouts(cfg, count, key)?
        .into_iter()
        .map(|r| r.trajectory)
        .collect();
    let summary = DatasetSummary::of(&data);
    Ok((data, summary))
}

/// One bisection probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStep {
    pub theta: f64,
    pub death_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub theta: f64,
    pub death_rate: f64,
    pub target: f64,
    pub count: usize,
    pub seed: u64,
    pub steps: Vec<CalibrationStep>,
}

/// Bisection on `theta*` until the simulated death rate is within `tol` of
/// `target` or `max_iter` probes were made. Shared random numbers make the
/// death rate monotone in `theta*`.
pub fn calibrate_theta(
    base: &WorldConfig,
    target: f64,
    count: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<Calibration> {
    let key = RngKey::new(seed);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut steps = Vec::new();
    let mut best = CalibrationStep {
        theta: 0.5,
        death_rate: f64::NAN,
    };
    for _ in 0..max_iter {
        let theta = 0.5 * (lo + hi);
        let cfg = WorldConfig {
            theta_star: theta,
            ..base.clone()
        };
        let (_, s) = generate_dataset(&cfg, count, &key)?;
        let probe = CalibrationStep {
            theta,
            death_rate: s.death_rate,
        };
        steps.push(probe);
        if best.death_rate.is_nan() || (probe.death_rate - target).abs() < (best.death_rate - target).abs() {
            best = probe;
        }
        if (probe.death_rate - target).abs() <= tol {
            break;
        }
        if probe.death_rate < target {
            lo = theta;
        } else {
            hi = theta;
        }
    }
    Ok(Calibration {
        theta: best.theta,
        death_rate: best.death_rate,
        target,
        count,
        seed,
        steps,
    })
}
