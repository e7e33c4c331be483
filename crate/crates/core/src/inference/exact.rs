use std::collections::BTreeMap;

use super::{InferenceError, InitialDistribution, Result};
use crate::neural::NeuralContext;
use crate::symbolic::{enumerate_joint, JointMode, Model, SymbolicError, Value, DEFAULT_JOINT_CAP};

/// Exact filtered distributions over full states for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelForward {
    pub filtered: Vec<BTreeMap<Vec<Value>, f64>>,
    pub log_evidence: f64,
}

impl ModelForward {
    /// Probability at time `t` of the states satisfying `pred`.
    pub fn probability(&self, t: usize, pred: impl Fn(&[Value]) -> bool) -> f64 {
        self.filtered[t]
            .iter()
            .filter(|(s, _)| pred(s))
            .map(|(_, p)| p)
            .sum()
    }
}

/// Forward recursion over the enumerated state space. Each predict-update
/// step enumerates the full joint of every reachable previous state against
/// the model's joint likelihood; `cap` bounds the filtered support.
pub fn exact_forward_model<'t>(
    model: &Model,
    init: &InitialDistribution,
    exos: &[Vec<Value>],
    zs: &[Option<Value>],
    ctx: &dyn NeuralContext<'t>,
    cap: usize,
) -> Result<ModelForward> {
    if exos.len() != zs.len() {
        return Err(InferenceError::Contract("one exogenous input per observation".into()));
    }
    init.validate(model.schema())?;
    let mut belief: BTreeMap<Vec<Value>, f64> = BTreeMap::new();
    for (s, p) in init.enumerate(model.schema().num_vars()) {
        *belief.entry(s).or_insert(0.0) += p;
    }
    if belief.len() > cap {
        return Err(SymbolicError::CapExceeded(cap).into());
    }
    let mut filtered = vec![belief.clone()];
    let mut log_evidence = 0.0;
    for (exo, z) in exos.iter().zip(zs) {
        let mut next: BTreeMap<Vec<Value>, f64> = BTreeMap::new();
        let mut evidence = 0.0;
        for (s, p) in &belief {
            match enumerate_joint(model, s, exo, *z, ctx, JointMode::Direct, DEFAULT_JOINT_CAP) {
                Ok(j) => {
                    let ev = j.log_evidence.exp();
                    evidence += p * ev;
                    for (s2, q) in j.entries {
                        *next.entry(s2).or_insert(0.0) += p * ev * q;
                    }
                }
                Err(SymbolicError::ImpossibleEvidence { .. }) => {}
                Err(e) => return Err(e.into()),
            }
            if next.len() > cap {
                return Err(SymbolicError::CapExceeded(cap).into());
            }
        }
        if evidence <= 0.0 {
            return Err(InferenceError::Degenerate);
        }
        log_evidence += evidence.ln();
        for q in next.values_mut() {
            *q /= evidence;
        }
        belief = next;
        filtered.push(belief.clone());
    }
    Ok(ModelForward {
        filtered,
        log_evidence,
    })
}
