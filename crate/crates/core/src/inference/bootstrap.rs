use crate::diffcore::logsumexp;
use crate::stochastics::RngKey;

use super::{effective_sample_size, InferenceError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    Multinomial,
    Systematic,
}

/// Particles of the non-differentiable bootstrap filter.
#[derive(Debug, Clone)]
pub struct BootstrapBelief<S> {
    pub particles: Vec<S>,
    pub log_weights: Vec<f64>,
    pub resampling_events: usize,
    pub ess_trace: Vec<f64>,
}

impl<S: Clone> BootstrapBelief<S> {
    pub fn new(particles: Vec<S>) -> Result<Self> {
        let n = particles.len();
        if n < 1 {
            return Err(InferenceError::Contract("bootstrap filter needs particles".into()));
        }
        Ok(Self {
            particles,
            log_weights: vec![0.0; n],
            resampling_events: 0,
            ess_trace: vec![n as f64],
        })
    }

    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        let z = logsumexp(&self.log_weights);
        if z == f64::NEG_INFINITY {
            return Err(InferenceError::Degenerate);
        }
        Ok(self.log_weights.iter().map(|lw| (lw - z).exp()).collect())
    }
}

/// Ancestor indices drawn i.i.d. from `weights` (normalised).
pub fn resample_multinomial(weights: &[f64], key: &RngKey) -> Vec<usize> {
    let n = weights.len();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    (0..n)
        .map(|i| {
            let u = key.uniform(i as u64) * acc;
            cdf.partition_point(|&c| c <= u).min(n - 1)
        })
        .collect()
}

/// Systematic resampling with the single offset `u` in `[0, 1)`.
pub fn resample_systematic(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut acc = weights[0] / total;
    let mut j = 0;
    for i in 0..n {
        let pos = (i as f64 + u) / n as f64;
        while pos >= acc && j + 1 < n {
            j += 1;
            acc += weights[j] / total;
        }
        out.push(j);
    }
    out
}

/// Propagate through the prior transition, reweight by the likelihood, and
/// resample when ESS falls below `ess_threshold * N`. After resampling every
/// particle carries the mean weight so the evidence estimate is preserved.
pub fn bootstrap_pf_step<S: Clone>(
    mut belief: BootstrapBelief<S>,
    transition: impl Fn(&S, &RngKey) -> S,
    likelihood: impl Fn(&S) -> f64,
    key: RngKey,
    scheme: Resampling,
    ess_threshold: f64,
) -> Result<BootstrapBelief<S>> {
    let n = belief.particles.len();
    let prop = key.split(0);
    for i in 0..n {
        if belief.log_weights[i] == f64::NEG_INFINITY {
            continue;
        }
        let next = transition(&belief.particles[i], &prop.split(i as u64));
        let l = likelihood(&next);
        belief.log_weights[i] += if l > 0.0 { l.ln() } else { f64::NEG_INFINITY };
        belief.particles[i] = next;
    }
    let ess = effective_sample_size(&belief.log_weights)?;
    belief.ess_trace.push(ess);
    if ess < ess_threshold * n as f64 {
        let w = belief.normalized_weights()?;
        let rk = key.split(1);
        let idx = match scheme {
            Resampling::Multinomial => resample_multinomial(&w, &rk),
            Resampling::Systematic => resample_systematic(&w, rk.uniform(0)),
        };
        let mean_lw = logsumexp(&belief.log_weights) - (n as f64).ln();
        belief.particles = idx.iter().map(|&j| belief.particles[j].clone()).collect();
        belief.log_weights = vec![mean_lw; n];
        belief.resampling_events += 1;
    }
    Ok(belief)
}
