use std::collections::BTreeMap;
use std::rc::Rc;

use rustc_hash::FxHashMap;
use smallvec::SmallVec;

use super::{InferenceError, ParticleBelief, Result};
use crate::neural::NeuralContext;
use crate::stochastics::RngKey;
use crate::symbolic::{
    enumerate_joint, GroupTable, JointMode, Model, SymbolicError, SymbolicState, Value, DEFAULT_JOINT_CAP,
};

type Memo<'t> = FxHashMap<(usize, SmallVec<[Value; 12]>), Option<Rc<GroupTable<'t>>>>;

/// Advances every particle by one step with the exact per-group posterior as
/// proposal. No resampling: the particle count and order never change.
///
/// Particle `i`, group `g` draws its entry with `key.split(i).split(g)`.
pub fn rbpf_step<'t>(
    mut belief: ParticleBelief<'t>,
    model: &Model,
    exo: &[Value],
    z: Option<Value>,
    ctx: &dyn NeuralContext<'t>,
    key: RngKey,
) -> Result<ParticleBelief<'t>> {
    let plan = model.plan(z)?;
    let nv = model.schema().num_vars();
    let differentiable = belief.tape.is_some();
    let mut memo: Memo<'t> = FxHashMap::default();
    let time = belief.time + 1;
    let mut next = Vec::with_capacity(belief.len());
    for i in 0..belief.len() {
        let prev = &belief.particles[i].values;
        if !belief.is_alive(i) {
            next.push(SymbolicState::new(prev.clone(), time));
            continue;
        }
        let pk = key.split(i as u64);
        let mut current = vec![0; nv];
        let mut log_inc = 0.0;
        let mut alive = true;
        for (g, spec) in plan.groups.iter().enumerate() {
            let mk = (g, spec.key(prev, &current, exo));
            let table = match memo.get(&mk) {
                Some(t) => t.clone(),
                None => {
                    let t = match model.group_table(&plan, g, prev, &current, exo, ctx, DEFAULT_JOINT_CAP) {
                        Ok(t) => Some(Rc::new(t)),
                        Err(SymbolicError::ImpossibleEvidence { .. }) => None,
                        Err(e) => return Err(e.into()),
                    };
                    memo.insert(mk, t.clone());
                    t
                }
            };
            let Some(table) = table else {
                alive = false;
                break;
            };
            let j = table.sample(pk.split(g as u64).uniform(0));
            table.assign(j, &mut current);
            log_inc += table.log_z;
            if differentiable {
                if table.len() > 1 {
                    if let Some(s) = table.log_posterior_var(j) {
                        belief.score_terms.as_mut().expect("tape")[i].push(s);
                    }
                }
                if spec.has_factors() {
                    if let Some(e) = table.log_evidence_var() {
                        belief.evidence_terms.as_mut().expect("tape")[i].push(e);
                    }
                }
            }
        }
        if alive {
            belief.log_weights[i] += log_inc;
            next.push(SymbolicState::new(current, time));
        } else {
            belief.log_weights[i] = f64::NEG_INFINITY;
            next.push(SymbolicState::new(prev.clone(), time));
        }
    }
    belief.particles = next;
    belief.time = time;
    if let Some(h) = belief.history.as_mut() {
        h.push(belief.particles.clone());
    }
    let ess = belief.ess().unwrap_or(0.0);
    belief.ess_trace.push(ess);
    Ok(belief)
}

/// Prior transition sampler (no observation) for use with the bootstrap
/// filter. Draw `g` of a call keyed `k` uses `k.split(g)`.
pub fn prior_transition<'m, 'c, 't>(
    model: &'m Model,
    exo: &'m [Value],
    ctx: &'c dyn NeuralContext<'t>,
) -> impl Fn(&SymbolicState, &RngKey) -> SymbolicState + use<'m, 'c, 't>
where
    'c: 'm,
    't: 'm,
{
    move |s, k| {
        let plan = model.plan(None).expect("plan without observation");
        let mut current = vec![0; s.values.len()];
        for g in 0..plan.groups.len() {
            let t = model
                .group_table(&plan, g, &s.values, &current, exo, ctx, DEFAULT_JOINT_CAP)
                .expect("prior transition is always possible");
            let j = t.sample(k.split(g as u64).uniform(0));
            t.assign(j, &mut current);
        }
        SymbolicState::new(current, s.time + 1)
    }
}

/// Rao-Blackwellised estimate of the next filtered distribution: every live
/// particle contributes its exact factorised conditional given `z`, weighted
/// by its normalised weight times the evidence it assigns to `z`. Identical
/// particles are enumerated once.
pub fn rao_blackwell_filtered<'t>(
    belief: &ParticleBelief<'_>,
    model: &Model,
    exo: &[Value],
    z: Option<Value>,
    ctx: &dyn NeuralContext<'t>,
) -> Result<BTreeMap<Vec<Value>, f64>> {
    let w = belief.normalized_weights()?;
    let mut prior: BTreeMap<&[Value], f64> = BTreeMap::new();
    for (s, w) in belief.particles.iter().zip(w) {
        if w > 0.0 {
            *prior.entry(&s.values[..]).or_insert(0.0) += w;
        }
    }
    let mut out: BTreeMap<Vec<Value>, f64> = BTreeMap::new();
    let mut total = 0.0;
    for (prev, p) in prior {
        match enumerate_joint(model, prev, exo, z, ctx, JointMode::Factorised, DEFAULT_JOINT_CAP) {
            Ok(j) => {
                let m = p * j.log_evidence.exp();
                total += m;
                for (s, q) in j.entries {
                    *out.entry(s).or_insert(0.0) += m * q;
                }
            }
            Err(SymbolicError::ImpossibleEvidence { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if total <= 0.0 {
        return Err(InferenceError::Degenerate);
    }
    for q in out.values_mut() {
        *q /= total;
    }
    Ok(out)
}
