use std::collections::BTreeMap;

use super::engine::{GroupSpec, StepPlan};
use super::{Model, Result, SymbolicError, Value, VarId};
use crate::diffcore::logsumexp;
use crate::neural::NeuralContext;
use crate::stochastics::RngKey;

pub const DEFAULT_JOINT_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointMode {
    /// Chain the per-group tables of the step plan.
    Factorised,
    /// Enumerate all clusters together and weight by the joint likelihood.
    Direct,
}

/// Posterior over full current-state assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub entries: BTreeMap<Vec<Value>, f64>,
    pub log_evidence: f64,
}

impl JointTable {
    pub fn total_variation(&self, other: &JointTable) -> f64 {
        let mut tv = 0.0;
        for (s, p) in &self.entries {
            tv += (p - other.entries.get(s).copied().unwrap_or(0.0)).abs();
        }
        for (s, q) in &other.entries {
            if !self.entries.contains_key(s) {
                tv += q;
            }
        }
        0.5 * tv
    }

    /// Marginal over the values of `vars`.
    pub fn marginal(&self, vars: &[VarId]) -> BTreeMap<Vec<Value>, f64> {
        let mut out = BTreeMap::new();
        for (s, p) in &self.entries {
            let k: Vec<Value> = vars.iter().map(|v| s[v.0]).collect();
            *out.entry(k).or_insert(0.0) += p;
        }
        out
    }
}

/// Exact posterior over the next full state.
pub fn enumerate_joint<'t>(
    model: &Model,
    prev: &[Value],
    exo: &[Value],
    z: Option<Value>,
    ctx: &dyn NeuralContext<'t>,
    mode: JointMode,
    cap: usize,
) -> Result<JointTable> {
    let nv = model.schema.num_vars();
    match mode {
        JointMode::Factorised => {
            let plan = model.plan(z)?;
            let mut entries = BTreeMap::new();
            let mut log_evidence = None;
            let mut current = vec![0; nv];
            chain(model, &plan, 0, prev, exo, ctx, cap, &mut current, 0.0, 0.0, &mut entries, &mut log_evidence)?;
            Ok(JointTable {
                entries,
                log_evidence: log_evidence.unwrap_or(f64::NEG_INFINITY),
            })
        }
        JointMode::Direct => {
            let nc = model.schema.clusters().len();
            let clusters: Vec<usize> = (0..nc).collect();
            let vars: Vec<VarId> = clusters
                .iter()
                .flat_map(|&c| model.schema.clusters()[c].vars.iter().copied())
                .collect();
            let plan = StepPlan {
                z,
                groups: vec![GroupSpec {
                    clusters,
                    vars,
                    clamps: Vec::new(),
                    tables: Vec::new(),
                    key_reads: Vec::new(),
                }],
                factors: Vec::new(),
            };
            let current = vec![0; nv];
            let prior = model.group_table(&plan, 0, prev, &current, exo, ctx, cap)?;
            let mut weighted: BTreeMap<Vec<Value>, f64> = BTreeMap::new();
            let mut logs = Vec::new();
            let mut state = vec![0; nv];
            for j in 0..prior.len() {
                prior.assign(j, &mut state);
                let lik = model.observation.likelihood(&state, z);
                if lik > 0.0 {
                    let lw = prior.log_prob(j) + lik.ln();
                    logs.push(lw);
                    *weighted.entry(state.clone()).or_insert(0.0) += lw.exp();
                }
            }
            if weighted.is_empty() {
                return Err(SymbolicError::ImpossibleEvidence {
                    prev: prev.to_vec(),
                    z,
                });
            }
            let log_evidence = logsumexp(&logs);
            let norm = log_evidence.exp();
            for p in weighted.values_mut() {
                *p /= norm;
            }
            Ok(JointTable {
                entries: weighted,
                log_evidence,
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn chain<'t>(
    model: &Model,
    plan: &StepPlan,
    g: usize,
    prev: &[Value],
    exo: &[Value],
    ctx: &dyn NeuralContext<'t>,
    cap: usize,
    current: &mut Vec<Value>,
    log_p: f64,
    log_ev: f64,
    out: &mut BTreeMap<Vec<Value>, f64>,
    evidence: &mut Option<f64>,
) -> Result<()> {
    if g == plan.groups.len() {
        if out.len() >= cap && !out.contains_key(current) {
            return Err(SymbolicError::CapExceeded(cap));
        }
        *out.entry(current.clone()).or_insert(0.0) += log_p.exp();
        evidence.get_or_insert(log_ev);
        return Ok(());
    }
    let table = model.group_table(plan, g, prev, current, exo, ctx, cap)?;
    for j in 0..table.len() {
        table.assign(j, current);
        chain(
            model,
            plan,
            g + 1,
            prev,
            exo,
            ctx,
            cap,
            current,
            log_p + table.log_prob(j),
            log_ev + table.log_z,
            out,
            evidence,
        )?;
    }
    Ok(())
}

/// One (previous state, exogenous input, observation) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationInstance {
    pub prev: Vec<Value>,
    pub exo: Vec<Value>,
    pub z: Option<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub trials: usize,
    /// Trials where both paths agreed the evidence is impossible.
    pub impossible: usize,
    pub max_tv: f64,
    pub max_log_evidence_gap: f64,
    pub worst: Option<ValidationInstance>,
}

impl ValidationReport {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn passed(&self) -> bool {
        self.max_tv < Self::TOLERANCE && self.max_log_evidence_gap < Self::TOLERANCE
    }
}

/// Compares factorised and direct joint posteriors on sampled instances.
pub fn validate_clusters<'t>(
    model: &Model,
    trials: usize,
    key: RngKey,
    mut sample: impl FnMut(&RngKey) -> ValidationInstance,
    ctx: &dyn NeuralContext<'t>,
) -> Result<ValidationReport> {
    let mut report = ValidationReport {
        trials,
        impossible: 0,
        max_tv: 0.0,
        max_log_evidence_gap: 0.0,
        worst: None,
    };
    for i in 0..trials {
        let inst = sample(&key.split(i as u64));
        let f = enumerate_joint(model, &inst.prev, &inst.exo, inst.z, ctx, JointMode::Factorised, DEFAULT_JOINT_CAP);
        let d = enumerate_joint(model, &inst.prev, &inst.exo, inst.z, ctx, JointMode::Direct, DEFAULT_JOINT_CAP);
        let (tv, gap) = match (f, d) {
            (Ok(f), Ok(d)) => (f.total_variation(&d), (f.log_evidence - d.log_evidence).abs()),
            (Err(SymbolicError::ImpossibleEvidence { .. }), Err(SymbolicError::ImpossibleEvidence { .. })) => {
                report.impossible += 1;
                (0.0, 0.0)
            }
            (Err(SymbolicError::ImpossibleEvidence { .. }), Ok(_))
            | (Ok(_), Err(SymbolicError::ImpossibleEvidence { .. })) => (1.0, f64::INFINITY),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        if tv > report.max_tv || gap > report.max_log_evidence_gap {
            report.worst = Some(inst.clone());
        }
        report.max_tv = report.max_tv.max(tv);
        report.max_log_evidence_gap = report.max_log_evidence_gap.max(gap);
    }
    Ok(report)
}
