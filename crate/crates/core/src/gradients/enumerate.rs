use std::collections::BTreeMap;

use super::{GradientError, Result};
use crate::diffcore::{Tape, Var};
use crate::inference::InitialDistribution;
use crate::neural::{NeuralContext, ParamStore, TapeContext};
use crate::symbolic::{Model, StepPlan, SymbolicError, Value};

/// One reachable next state with differentiable `log p(x' | x, z)` and
/// `log p(z | x)`.
#[derive(Debug, Clone)]
pub struct Successor<'t> {
    pub state: Vec<Value>,
    pub log_cond: Var<'t>,
    pub log_evidence: Var<'t>,
}

/// Every next state reachable from `prev` under observation `z`, obtained by
/// expanding the step plan's groups in order. Empty when the evidence is
/// impossible.
pub fn successors<'t>(
    model: &Model,
    prev: &[Value],
    exo: &[Value],
    z: Option<Value>,
    ctx: &dyn NeuralContext<'t>,
    tape: &'t Tape,
) -> Result<Vec<Successor<'t>>> {
    let plan = model.plan(z)?;
    let mut out = Vec::new();
    let current = vec![0; model.schema().num_vars()];
    expand(model, &plan, 0, prev, current, exo, ctx, tape, None, None, &mut out)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn expand<'t>(
    model: &Model,
    plan: &StepPlan,
    g: usize,
    prev: &[Value],
    current: Vec<Value>,
    exo: &[Value],
    ctx: &dyn NeuralContext<'t>,
    tape: &'t Tape,
    cond: Option<Var<'t>>,
    ev: Option<Var<'t>>,
    out: &mut Vec<Successor<'t>>,
) -> Result<()> {
    if g == plan.groups.len() {
        out.push(Successor {
            state: current,
            log_cond: cond.unwrap_or_else(|| tape.scalar(0.0)),
            log_evidence: ev.unwrap_or_else(|| tape.scalar(0.0)),
        });
        return Ok(());
    }
    let table = match model.group_table(plan, g, prev, &current, exo, ctx, usize::MAX) {
        Ok(t) => t,
        Err(SymbolicError::ImpossibleEvidence { .. }) => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    let add = |acc: Option<Var<'t>>, v: Var<'t>| Some(acc.map_or(v, |a| a + v));
    let ev = if plan.groups[g].has_factors() {
        let lz = table.log_evidence_var().unwrap_or_else(|| tape.scalar(table.log_z));
        add(ev, lz)
    } else {
        ev
    };
    for j in 0..table.len() {
        let lp = table
            .log_posterior_var(j)
            .unwrap_or_else(|| tape.scalar(table.log_prob(j)));
        let mut next = current.clone();
        table.assign(j, &mut next);
        expand(model, plan, g + 1, prev, next, exo, ctx, tape, add(cond, lp), ev, out)?;
    }
    Ok(())
}

/// Exact posterior expectation of a trajectory functional and its gradient.
#[derive(Debug, Clone)]
pub struct ExactGradient {
    pub value: f64,
    pub gradient: BTreeMap<String, Vec<f64>>,
    /// Number of trajectories with nonzero posterior weight.
    pub trajectories: usize,
}

/// `E[f(X_0..X_T) | z_1..z_T]` by enumerating every trajectory, differentiated
/// by reverse mode through the enumeration. Step `t` uses `exos[t-1]` (or no
/// exogenous input when `exos` is shorter) and `zs[t-1]`.
pub fn exact_expectation_gradient(
    model: &Model,
    init: &InitialDistribution,
    exos: &[Vec<Value>],
    zs: &[Option<Value>],
    store: &ParamStore,
    f: impl Fn(&[Vec<Value>]) -> f64,
    cap: usize,
) -> Result<ExactGradient> {
    init.validate(model.schema())?;
    let tape = Tape::new();
    let ctx = TapeContext::new(&tape, store);
    let nv = model.schema().num_vars();
    let mut logw = Vec::new();
    let mut fs = Vec::new();
    let mut stack: Vec<(Vec<Vec<Value>>, Var<'_>)> = init
        .enumerate(nv)
        .into_iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(s, p)| (vec![s], tape.scalar(p.ln())))
        .collect();
    while let Some((traj, lw)) = stack.pop() {
        let t = traj.len();
        if t > zs.len() {
            fs.push(f(&traj));
            logw.push(lw);
            continue;
        }
        let exo = exos.get(t - 1).map_or(&[][..], Vec::as_slice);
        let succ = successors(model, &traj[t - 1], exo, zs[t - 1], &ctx, &tape)?;
        for s in succ {
            if stack.len() + logw.len() >= cap {
                return Err(SymbolicError::CapExceeded(cap).into());
            }
            let mut next = traj.clone();
            next.push(s.state);
            stack.push((next, lw + s.log_cond + s.log_evidence));
        }
    }
    if logw.is_empty() {
        return Err(GradientError::Contract("observations are impossible under the model".into()));
    }
    let e = tape.concat(&logw).log_softmax().exp().dot(tape.vector(&fs));
    let grads = tape.backward(e)?;
    Ok(ExactGradient {
        value: e.value(),
        gradient: grads.params(&tape),
        trajectories: logw.len(),
    })
}
