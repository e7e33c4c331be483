use crate::diffcore::{logsumexp, Tape, Var};
use crate::stochastics::{sample_index, RngKey};
use crate::symbolic::{Schema, SymbolicState, Value, VarId};

use super::{InferenceError, Result};

/// `(sum w)^2 / sum w^2` over normalised weights.
pub fn effective_sample_size(log_weights: &[f64]) -> Result<f64> {
    let z = logsumexp(log_weights);
    if z == f64::NEG_INFINITY {
        return Err(InferenceError::Degenerate);
    }
    let sq: f64 = log_weights.iter().map(|lw| (2.0 * (lw - z)).exp()).sum();
    Ok(1.0 / sq)
}

/// Product of independent blocks, each a finite joint over some variables.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDistribution {
    blocks: Vec<(Vec<VarId>, Vec<(Vec<Value>, f64)>)>,
}

impl InitialDistribution {
    pub fn new() -> Self {
        Self { blocks: Vec::new() }
    }

    pub fn fixed(mut self, var: VarId, value: Value) -> Self {
        self.blocks.push((vec![var], vec![(vec![value], 1.0)]));
        self
    }

    /// Independent block over `vars`; probabilities are normalised here.
    pub fn block(mut self, vars: Vec<VarId>, support: Vec<(Vec<Value>, f64)>) -> Self {
        let total: f64 = support.iter().map(|(_, p)| p).sum();
        let support = support.into_iter().map(|(v, p)| (v, p / total)).collect();
        self.blocks.push((vars, support));
        self
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let mut seen = vec![false; schema.num_vars()];
        for (vars, support) in &self.blocks {
            if support.is_empty() {
                return Err(InferenceError::Contract("empty initial block".into()));
            }
            for v in vars {
                if v.0 >= seen.len() || std::mem::replace(&mut seen[v.0], true) {
                    return Err(InferenceError::Contract(format!(
                        "{v:?} covered twice or unknown in initial distribution"
                    )));
                }
            }
            for (vals, p) in support {
                if vals.len() != vars.len() || !(*p >= 0.0) {
                    return Err(InferenceError::Contract("malformed initial block".into()));
                }
                for (v, &x) in vars.iter().zip(vals) {
                    schema.check_value(*v, x)?;
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(InferenceError::Contract(format!(
                "{} missing from initial distribution",
                schema.vars()[i].name
            )));
        }
        Ok(())
    }

    pub fn sample(&self, num_vars: usize, key: &RngKey) -> Vec<Value> {
        let mut out = vec![0; num_vars];
        for (b, (vars, support)) in self.blocks.iter().enumerate() {
            let probs: Vec<f64> = support.iter().map(|(_, p)| *p).collect();
            let j = sample_index(&probs, key.uniform(b as u64));
            for (v, &x) in vars.iter().zip(&support[j].0) {
                out[v.0] = x;
            }
        }
        out
    }

    /// Every joint assignment with its probability.
    pub fn enumerate(&self, num_vars: usize) -> Vec<(Vec<Value>, f64)> {
        let mut acc = vec![(vec![0; num_vars], 1.0)];
        for (vars, support) in &self.blocks {
            let mut next = Vec::with_capacity(acc.len() * support.len());
            for (state, p) in &acc {
                for (vals, q) in support {
                    if *q == 0.0 {
                        continue;
                    }
                    let mut s = state.clone();
                    for (v, &x) in vars.iter().zip(vals) {
                        s[v.0] = x;
                    }
                    next.push((s, p * q));
                }
            }
            acc = next;
        }
        acc
    }
}

impl Default for InitialDistribution {
    fn default() -> Self {
        Self::new()
    }
}

/// Self-normalised estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub ess: f64,
}

/// Weighted particles with accumulated differentiable log-scores.
///
/// `log_weights` hold the accumulated log-evidence as plain numbers; a
/// particle whose evidence became impossible carries `-inf` and is frozen.
/// When built with a tape, every sampled step appends its log posterior
/// probability to the particle's score terms and its log-evidence to the
/// evidence terms.
#[derive(Debug, Clone)]
pub struct ParticleBelief<'t> {
    pub particles: Vec<SymbolicState>,
    pub log_weights: Vec<f64>,
    pub(crate) score_terms: Option<Vec<Vec<Var<'t>>>>,
    pub(crate) evidence_terms: Option<Vec<Vec<Var<'t>>>>,
    pub(crate) tape: Option<&'t Tape>,
    pub time: usize,
    pub(crate) history: Option<Vec<Vec<SymbolicState>>>,
    pub resampling_events: usize,
    pub ess_trace: Vec<f64>,
}

impl<'t> ParticleBelief<'t> {
    pub fn new(particles: Vec<SymbolicState>, tape: Option<&'t Tape>, track_history: bool) -> Result<Self> {
        let n = particles.len();
        if n < 2 {
            return Err(InferenceError::Contract(format!("need at least 2 particles, got {n}")));
        }
        let time = particles[0].time;
        Ok(Self {
            history: track_history.then(|| vec![particles.clone()]),
            particles,
            log_weights: vec![0.0; n],
            score_terms: tape.map(|_| vec![Vec::new(); n]),
            evidence_terms: tape.map(|_| vec![Vec::new(); n]),
            tape,
            time,
            resampling_events: 0,
            ess_trace: vec![n as f64],
        })
    }

    /// `n` particles drawn from `init` with particle `i` keyed by `key.split(i)`.
    pub fn sample_initial(
        schema: &Schema,
        init: &InitialDistribution,
        n: usize,
        key: RngKey,
        tape: Option<&'t Tape>,
        track_history: bool,
    ) -> Result<Self> {
        init.validate(schema)?;
        let particles = (0..n)
            .map(|i| SymbolicState::new(init.sample(schema.num_vars(), &key.split(i as u64)), 0))
            .collect();
        Self::new(particles, tape, track_history)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn tape(&self) -> Option<&'t Tape> {
        self.tape
    }

    pub fn is_alive(&self, i: usize) -> bool {
        self.log_weights[i] > f64::NEG_INFINITY
    }

    fn summed(&self, terms: &Option<Vec<Vec<Var<'t>>>>, i: usize) -> Option<Var<'t>> {
        let tape = self.tape?;
        let t = &terms.as_ref()?[i];
        Some(match t.len() {
            0 => tape.scalar(0.0),
            1 => t[0],
            _ => tape.concat(t).sum(),
        })
    }

    /// Differentiable accumulated log-probability of particle `i`'s samples.
    pub fn log_score(&self, i: usize) -> Option<Var<'t>> {
        self.summed(&self.score_terms, i)
    }

    /// Differentiable accumulated log-evidence of particle `i`. Frozen
    /// particles only include the steps before their evidence failed.
    pub fn log_evidence(&self, i: usize) -> Option<Var<'t>> {
        self.summed(&self.evidence_terms, i)
    }

    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        let z = logsumexp(&self.log_weights);
        if z == f64::NEG_INFINITY {
            return Err(InferenceError::Degenerate);
        }
        Ok(self.log_weights.iter().map(|lw| (lw - z).exp()).collect())
    }

    pub fn ess(&self) -> Result<f64> {
        effective_sample_size(&self.log_weights)
    }

    /// Estimate of `log p(z_1..z_t)`: log of the mean particle weight.
    pub fn log_likelihood_estimate(&self) -> f64 {
        logsumexp(&self.log_weights) - (self.len() as f64).ln()
    }

    /// States of particle `i` at times `0..=time`, when history is tracked.
    pub fn history(&self, i: usize) -> Option<Vec<&SymbolicState>> {
        self.history
            .as_ref()
            .map(|h| h.iter().map(|step| &step[i]).collect())
    }

    /// Self-normalised estimate of `E[f]` with standard error
    /// `sqrt(sum w_i^2 (f_i - mean)^2)`.
    pub fn query_expectation(&self, f: impl Fn(usize, &SymbolicState) -> f64) -> Result<QueryEstimate> {
        let w = self.normalized_weights()?;
        let fs: Vec<f64> = self
            .particles
            .iter()
            .enumerate()
            .map(|(i, s)| if w[i] > 0.0 { f(i, s) } else { 0.0 })
            .collect();
        let mean: f64 = w.iter().zip(&fs).map(|(w, f)| w * f).sum();
        let var: f64 = w.iter().zip(&fs).map(|(w, f)| w * w * (f - mean).powi(2)).sum();
        Ok(QueryEstimate {
            mean,
            std_error: var.sqrt(),
            ess: 1.0 / w.iter().map(|x| x * x).sum::<f64>(),
        })
    }

    /// Differentiable self-normalised estimate `sum softmax(LW)_i f_i` over
    /// live particles, where `LW_i` are the evidence Vars. Without a tape the
    /// value is returned as a constant on `tape`.
    pub fn query_expectation_var(&self, tape: &'t Tape, f_values: &[f64]) -> Result<Var<'t>> {
        if f_values.len() != self.len() {
            return Err(InferenceError::Contract("one f value per particle".into()));
        }
        let live: Vec<usize> = (0..self.len()).filter(|&i| self.is_alive(i)).collect();
        if live.is_empty() {
            return Err(InferenceError::Degenerate);
        }
        if self.evidence_terms.is_none() {
            let est = self.query_expectation(|i, _| f_values[i])?;
            return Ok(tape.scalar(est.mean));
        }
        let lw: Vec<Var<'t>> = live
            .iter()
            .map(|&i| self.log_evidence(i).expect("tracked"))
            .collect();
        let lw = tape.concat(&lw);
        let f = tape.vector(&live.iter().map(|&i| f_values[i]).collect::<Vec<_>>());
        Ok(lw.log_softmax().exp().dot(f))
    }
}
