use std::collections::BTreeMap;

use super::enumerate::successors;
use super::rloo::{rloo_surrogate, EstimatorBatch};
use super::{GradientError, Result};
use crate::diffcore::{Tape, Var};
use crate::neural::NeuralContext;
use crate::symbolic::{Model, SymbolicState, Value};

/// Transition probabilities between consecutive particle sets:
/// `probs[i][j] = p(x_t^i | x_{t-1}^j, z_t)`.
#[derive(Debug, Clone)]
pub struct MarginalStep<'t> {
    pub probs: Vec<Vec<Var<'t>>>,
}

impl MarginalStep<'_> {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `(1/N) sum_j probs[i][j]`.
    pub fn mean_prob(&self, i: usize) -> f64 {
        let row = &self.probs[i];
        row.iter().map(Var::value).sum::<f64>() / row.len() as f64
    }
}

/// Evaluates the `N x N` transition matrix between `prev` and `next`.
pub fn marginal_step<'t>(
    model: &Model,
    prev: &[SymbolicState],
    next: &[SymbolicState],
    exo: &[Value],
    z: Option<Value>,
    ctx: &dyn NeuralContext<'t>,
    tape: &'t Tape,
) -> Result<MarginalStep<'t>> {
    if prev.len() != next.len() {
        return Err(GradientError::Contract(format!(
            "{} previous and {} next particles",
            prev.len(),
            next.len()
        )));
    }
    let mut tables: BTreeMap<&[Value], BTreeMap<Vec<Value>, Var<'t>>> = BTreeMap::new();
    for p in prev {
        if !tables.contains_key(&p.values[..]) {
            let succ = successors(model, &p.values, exo, z, ctx, tape)?;
            tables.insert(&p.values, succ.into_iter().map(|s| (s.state, s.log_cond)).collect());
        }
    }
    let probs = next
        .iter()
        .map(|x| {
            prev.iter()
                .map(|p| match tables[&p.values[..]].get(&x.values) {
                    Some(lc) => lc.exp(),
                    None => tape.scalar(0.0),
                })
                .collect()
        })
        .collect();
    Ok(MarginalStep { probs })
}

/// Per-particle surrogates whose gradients estimate
/// `grad log p(x_T^i | z_1..z_T)`, built by applying leave-one-out estimation
/// through each step with the mean-transition baseline
/// `pbar^i = (1/N) sum_k p(x_t^i | x_{t-1}^k, z_t)`:
///
/// `G_t^i = (1/N) sum_j grad P[i][j] + 1/(N-1) sum_j (P[i][j] - pbar^i) grad S_{t-1}^j`
///
/// and `grad S_t^i = G_t^i / pbar^i`. `base` supplies `S_0`.
pub fn recursive_scores<'t>(base: &[Var<'t>], steps: &[MarginalStep<'t>]) -> Result<Vec<Var<'t>>> {
    let n = base.len();
    if n < 2 {
        return Err(GradientError::Contract(format!("need at least 2 samples, got {n}")));
    }
    let tape = base[0].tape();
    let mut scores = base.to_vec();
    for (t, step) in steps.iter().enumerate() {
        if step.len() != n || step.probs.iter().any(|r| r.len() != n) {
            return Err(GradientError::Contract(format!("step {t} is not {n} x {n}")));
        }
        let prev = tape.concat(&scores);
        scores = (0..n)
            .map(|i| {
                let pbar = step.mean_prob(i);
                if pbar <= 0.0 {
                    return Err(GradientError::Contract(format!(
                        "particle {i} at step {t} is unreachable from every predecessor"
                    )));
                }
                let row = &step.probs[i];
                let coeffs: Vec<f64> = row
                    .iter()
                    .map(|p| (p.value() - pbar) / (n - 1) as f64)
                    .collect();
                let g = tape.concat(row).sum().scale(1.0 / n as f64) + prev.dot(tape.vector(&coeffs));
                Ok(g.scale(1.0 / pbar))
            })
            .collect::<Result<_>>()?;
    }
    Ok(scores)
}

/// Leave-one-out surrogate for a query on the final marginal, with scores
/// from [`recursive_scores`]. With no steps this is exactly
/// [`rloo_surrogate`] on `base`.
pub fn recursive_rloo<'t>(
    f_values: Vec<f64>,
    f_vars: Option<Vec<Var<'t>>>,
    base: &[Var<'t>],
    steps: &[MarginalStep<'t>],
) -> Result<Var<'t>> {
    let scores = recursive_scores(base, steps)?;
    rloo_surrogate(&EstimatorBatch {
        f_values,
        f_vars,
        scores,
    })
}
