use std::sync::Arc;

use rayon::prelude::*;

use super::enumerate::exact_expectation_gradient;
use super::recursive::{marginal_step, recursive_rloo};
use super::rloo::{reinforce_surrogate, rloo_surrogate, EstimatorBatch};
use super::{GradientError, Result};
use crate::diffcore::{Tape, Var};
use crate::inference::{rbpf_step, InitialDistribution, ParticleBelief};
use crate::neural::{ParamStore, TapeContext, Tensor};
use crate::stochastics::RngKey;
use crate::symbolic::{
    Access, ClusterProgram, Factor, Model, NoObservation, ObservationModel, ParamBernoulli, ParamCategorical,
    Schema, SymbolicState, Value, VarId, DEFAULT_JOINT_CAP,
};

/// Binary chain `x_0 = 0`, `x_t ~ Bernoulli(sigmoid(b[x_{t-1}]))` with a
/// two-entry parameter `b` and no observations.
pub fn two_step_chain() -> (Model, InitialDistribution) {
    let mut sb = Schema::builder();
    sb.var("x", [0, 1]).cluster("chain", &["x"]);
    let schema = Arc::new(sb.build().expect("static schema"));
    let x = schema.expect_id("x").expect("declared");
    let prog = ClusterProgram::new().choice(
        "flip",
        Some(x),
        vec![Access::Prev(x)],
        ParamBernoulli {
            param: "b".into(),
            row_by: Some(Access::Prev(x)),
        },
    );
    let model = Model::new(schema, vec![prog], Arc::new(NoObservation)).expect("static model");
    (model, InitialDistribution::new().fixed(x, 0))
}

/// Per-coordinate summary of independent gradient estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorStats {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub variance: Vec<f64>,
}

impl EstimatorStats {
    pub fn from_samples(samples: &[Vec<f64>]) -> Self {
        let n = samples.len() as f64;
        let d = samples.first().map_or(0, Vec::len);
        let mean: Vec<f64> = (0..d).map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / n).collect();
        let variance: Vec<f64> = (0..d)
            .map(|k| samples.iter().map(|s| (s[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0))
            .collect();
        let std_error = variance.iter().map(|v| (v / n).sqrt()).collect();
        Self {
            mean,
            std_error,
            variance,
        }
    }

    /// Largest `|mean - exact| / std_error` over coordinates.
    pub fn max_z(&self, exact: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.std_error)
            .zip(exact)
            .map(|((m, se), e)| {
                let d = (m - e).abs();
                if *se > 0.0 {
                    d / se
                } else if d == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasednessReport {
    pub exact: Vec<f64>,
    pub estimator: EstimatorStats,
    /// Plain score-function estimator on the same samples, when measured.
    pub reinforce: Option<EstimatorStats>,
    pub batches: usize,
    pub particles: usize,
}

impl UnbiasednessReport {
    pub fn max_z(&self) -> f64 {
        self.estimator.max_z(&self.exact)
    }

    /// Whether every coordinate's variance is strictly below the baseline-free
    /// estimator's.
    pub fn variance_reduced(&self) -> Option<bool> {
        let r = self.reinforce.as_ref()?;
        Some(self.estimator.variance.iter().zip(&r.variance).all(|(a, b)| a < b))
    }
}

fn flat_grad(tape: &Tape, root: Var<'_>) -> Result<Vec<f64>> {
    Ok(tape.backward(root)?.params(tape).into_values().flatten().collect())
}

fn run_chain<'t>(
    model: &Model,
    init: &InitialDistribution,
    ctx: &TapeContext<'t, '_>,
    tape: &'t Tape,
    n: usize,
    key: &RngKey,
) -> Result<ParticleBelief<'t>> {
    let mut belief = ParticleBelief::sample_initial(model.schema(), init, n, key.split(0), Some(tape), true)?;
    for t in 1..=2u64 {
        belief = rbpf_step(belief, model, &[], None, ctx, key.split(t))?;
    }
    Ok(belief)
}

fn history_of(belief: &ParticleBelief<'_>, t: usize) -> Vec<SymbolicState> {
    (0..belief.len())
        .map(|i| belief.history(i).expect("tracked")[t].clone())
        .collect()
}

fn check_store(store: &ParamStore) -> Result<()> {
    match store.get("b") {
        Some(t) if t.len() == 2 => Ok(()),
        _ => Err(GradientError::Contract("the chain needs a two-entry parameter b".into())),
    }
}

/// Mean RLOO gradient of `E[1 + x_1 + 2 x_2]` on [`two_step_chain`] over
/// independent batches of `n` particles, against the enumerated gradient.
pub fn rloo_unbiasedness(store: &ParamStore, batches: usize, n: usize, key: RngKey) -> Result<UnbiasednessReport> {
    check_store(store)?;
    let (model, init) = two_step_chain();
    let f = |traj: &[Vec<Value>]| (1 + traj[1][0] + 2 * traj[2][0]) as f64;
    let exact = exact_expectation_gradient(&model, &init, &[], &[None, None], store, f, DEFAULT_JOINT_CAP)?;
    let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let tape = Tape::new();
            let ctx = TapeContext::new(&tape, store);
            let belief = run_chain(&model, &init, &ctx, &tape, n, &key.split(b as u64))?;
            let f_values = (0..n)
                .map(|i| {
                    let h = belief.history(i).expect("tracked");
                    f(&[h[0].values.clone(), h[1].values.clone(), h[2].values.clone()])
                })
                .collect();
            let scores = (0..n).map(|i| belief.log_score(i).expect("tape")).collect();
            let batch = EstimatorBatch::new(f_values, scores);
            let rloo = flat_grad(&tape, rloo_surrogate(&batch)?)?;
            let plain = flat_grad(&tape, reinforce_surrogate(&batch)?)?;
            Ok((rloo, plain))
        })
        .collect::<Result<_>>()?;
    let (rloo, plain): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
    Ok(UnbiasednessReport {
        exact: exact.gradient.into_values().flatten().collect(),
        estimator: EstimatorStats::from_samples(&rloo),
        reinforce: Some(EstimatorStats::from_samples(&plain)),
        batches,
        particles: n,
    })
}

/// Mean recursive leave-one-out gradient of the final-marginal query
/// `E[1 + 3 x_2]` on [`two_step_chain`], against the enumerated gradient.
pub fn recursive_unbiasedness(store: &ParamStore, batches: usize, n: usize, key: RngKey) -> Result<UnbiasednessReport> {
    check_store(store)?;
    let (model, init) = two_step_chain();
    let f = |x: &[Value]| (1 + 3 * x[0]) as f64;
    let exact = exact_expectation_gradient(
        &model,
        &init,
        &[],
        &[None, None],
        store,
        |traj| f(&traj[2]),
        DEFAULT_JOINT_CAP,
    )?;
    let samples: Vec<Vec<f64>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let tape = Tape::new();
            let ctx = TapeContext::new(&tape, store);
            let belief = run_chain(&model, &init, &ctx, &tape, n, &key.split(b as u64))?;
            let hist: Vec<Vec<SymbolicState>> = (0..=2).map(|t| history_of(&belief, t)).collect();
            let steps = (1..=2)
                .map(|t| marginal_step(&model, &hist[t - 1], &hist[t], &[], None, &ctx, &tape))
                .collect::<Result<Vec<_>>>()?;
            let base = vec![tape.scalar(0.0); n];
            let f_values = hist[2].iter().map(|s| f(&s.values)).collect();
            flat_grad(&tape, recursive_rloo(f_values, None, &base, &steps)?)
        })
        .collect::<Result<_>>()?;
    Ok(UnbiasednessReport {
        exact: exact.gradient.into_values().flatten().collect(),
        estimator: EstimatorStats::from_samples(&samples),
        reinforce: None,
        batches,
        particles: n,
    })
}

/// Emission table `rows[x][z]` read by one factor on `x`.
struct Emission {
    x: VarId,
    rows: Vec<Vec<f64>>,
}

impl ObservationModel for Emission {
    fn factors(&self, z: Option<Value>) -> Vec<Factor> {
        let Some(z) = z else { return Vec::new() };
        let col: Vec<f64> = self.rows.iter().map(|r| r[z as usize]).collect();
        vec![Factor::Table {
            name: "emission".into(),
            reads: vec![self.x],
            weight: Arc::new(move |v: &[Value]| col[v[0] as usize]),
        }]
    }
}

/// Chain over `x in 0..k` with a `k x k` logit table `logits` (rows indexed
/// by the previous state), a fixed non-uniform prior and a tabulated
/// emission. Logits are uniform in `[-1, 1)` from `key`.
pub fn categorical_chain(k: usize, emission: Vec<Vec<f64>>, key: RngKey) -> (Model, InitialDistribution, ParamStore) {
    let mut sb = Schema::builder();
    sb.var("x", 0..k as Value).cluster("x", &["x"]);
    let schema = Arc::new(sb.build().expect("static model"));
    let x = schema.expect_id("x").expect("static model");
    let labels: Vec<Value> = (0..k as Value).collect();
    let prog = ClusterProgram::new().choice(
        "step",
        Some(x),
        vec![Access::Prev(x)],
        ParamCategorical {
            param: "logits".into(),
            labels: labels.clone(),
            row_by: Some(Access::Prev(x)),
        },
    );
    let model = Model::new(schema, vec![prog], Arc::new(Emission { x, rows: emission })).expect("static model");
    let init = InitialDistribution::new().block(
        vec![x],
        labels.iter().map(|&l| (vec![l], 1.0 + l as f64)).collect(),
    );
    let mut store = ParamStore::new();
    store.insert(
        "logits",
        Tensor {
            rows: k,
            cols: k,
            data: (0..k * k).map(|i| 2.0 * key.uniform(i as u64) - 1.0).collect(),
        },
    );
    (model, init, store)
}
