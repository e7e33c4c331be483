use std::collections::BTreeMap;

use super::enumerate::successors;
use super::{GradientError, Result};
use crate::diffcore::{Gradients, Tape, Var};
use crate::inference::InitialDistribution;
use crate::neural::{ParamStore, TapeContext};
use crate::symbolic::{SymbolicError, Value};
use crate::symbolic::Model;

/// Outcome of [`log_derivative_check`]. Magnitudes are maxima over every
/// target state and parameter coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDerivReport {
    /// `max |grad p(x_t | z_1..t) - (term1 + term2)|`.
    pub max_abs_deviation: f64,
    pub max_abs_gradient: f64,
    /// Largest coordinate of `E[grad p(x_t | X_{t-1}, z_t)]`.
    pub max_abs_term1: f64,
    /// Largest coordinate of `E[p(x_t | X_{t-1}, z_t) grad log p(X_{t-1} | z)]`.
    pub max_abs_term2: f64,
    pub targets: usize,
    pub coordinates: usize,
}

fn lse<'t>(tape: &'t Tape, terms: &[Var<'t>]) -> Var<'t> {
    match terms {
        [one] => *one,
        _ => tape.concat(terms).logsumexp(),
    }
}

fn flatten(g: &Gradients, tape: &Tape) -> Vec<f64> {
    g.params(tape).into_values().flatten().collect()
}

/// Evaluates both sides of the log-derivative decomposition of the filtered
/// marginal at step `t` by exact enumeration:
///
/// `grad p(x_t | z) = E_w[grad p(x_t | X, z_t)] + E_w[p(x_t | X, z_t) grad log w(X)]`
///
/// where `w(x) = p(X_{t-1} = x | z_1..z_t)` and `z_s = zs[s-1]`. The left side
/// is differentiated through the summed-out marginal; the right side through
/// surrogates holding `w` or `w * p` constant.
pub fn log_derivative_check(
    model: &Model,
    init: &InitialDistribution,
    exos: &[Vec<Value>],
    zs: &[Option<Value>],
    store: &ParamStore,
    t: usize,
    cap: usize,
) -> Result<LogDerivReport> {
    if t == 0 || zs.len() < t {
        return Err(GradientError::Contract(format!(
            "step {t} needs 1 <= t <= {} observations",
            zs.len()
        )));
    }
    init.validate(model.schema())?;
    let tape = Tape::new();
    let ctx = TapeContext::new(&tape, store);
    let nv = model.schema().num_vars();
    let exo_at = |s: usize| exos.get(s - 1).map_or(&[][..], Vec::as_slice);

    let mut alpha: BTreeMap<Vec<Value>, Var<'_>> = init
        .enumerate(nv)
        .into_iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(s, p)| (s, tape.scalar(p.ln())))
        .collect();
    for s in 1..t {
        let mut terms: BTreeMap<Vec<Value>, Vec<Var<'_>>> = BTreeMap::new();
        for (x, la) in &alpha {
            for succ in successors(model, x, exo_at(s), zs[s - 1], &ctx, &tape)? {
                terms
                    .entry(succ.state)
                    .or_default()
                    .push(*la + succ.log_cond + succ.log_evidence);
            }
            if terms.len() > cap {
                return Err(SymbolicError::CapExceeded(cap).into());
            }
        }
        alpha = terms.into_iter().map(|(x, v)| (x, lse(&tape, &v))).collect();
    }

    // Previous states with their weight numerators and successor tables.
    struct Prev<'t> {
        raw: Var<'t>,
        succ: BTreeMap<Vec<Value>, Var<'t>>,
    }
    let mut prevs = Vec::new();
    for (x, la) in &alpha {
        let succ = successors(model, x, exo_at(t), zs[t - 1], &ctx, &tape)?;
        let Some(first) = succ.first() else { continue };
        let raw = *la + first.log_evidence;
        prevs.push(Prev {
            raw,
            succ: succ.into_iter().map(|s| (s.state, s.log_cond)).collect(),
        });
    }
    if prevs.is_empty() {
        return Err(GradientError::Contract("observations are impossible under the model".into()));
    }
    let norm = lse(&tape, &prevs.iter().map(|p| p.raw).collect::<Vec<_>>());
    let logw: Vec<Var<'_>> = prevs.iter().map(|p| p.raw - norm).collect();
    let mut targets: BTreeMap<&[Value], Vec<usize>> = BTreeMap::new();
    for (k, p) in prevs.iter().enumerate() {
        for x in p.succ.keys() {
            targets.entry(x).or_default().push(k);
        }
    }

    let mut report = LogDerivReport {
        max_abs_deviation: 0.0,
        max_abs_gradient: 0.0,
        max_abs_term1: 0.0,
        max_abs_term2: 0.0,
        targets: targets.len(),
        coordinates: 0,
    };
    for (x, ks) in &targets {
        let joint: Vec<Var<'_>> = ks.iter().map(|&k| prevs[k].raw + prevs[k].succ[*x]).collect();
        let lhs = (lse(&tape, &joint) - norm).exp();
        let mut term1 = Vec::with_capacity(ks.len());
        let mut term2 = Vec::with_capacity(ks.len());
        for &k in ks {
            let w = logw[k].value().exp();
            let c = prevs[k].succ[*x];
            term1.push(c.exp().scale(w));
            term2.push(logw[k].scale(w * c.value().exp()));
        }
        let g_lhs = flatten(&tape.backward(lhs)?, &tape);
        let g1 = flatten(&tape.backward(tape.concat(&term1).sum())?, &tape);
        let g2 = flatten(&tape.backward(tape.concat(&term2).sum())?, &tape);
        report.coordinates = g_lhs.len();
        for i in 0..g_lhs.len() {
            report.max_abs_deviation = report.max_abs_deviation.max((g_lhs[i] - g1[i] - g2[i]).abs());
            report.max_abs_gradient = report.max_abs_gradient.max(g_lhs[i].abs());
            report.max_abs_term1 = report.max_abs_term1.max(g1[i].abs());
            report.max_abs_term2 = report.max_abs_term2.max(g2[i].abs());
        }
    }
    Ok(report)
}
