use std::cell::RefCell;
use std::sync::Arc;

use rustc_hash::FxHashMap;
use smallvec::SmallVec;

use super::cluster::{Access, Factor, LogProbs, Model, Scope, Step};
use super::{Result, SymbolicError, Value, VarId};
use crate::diffcore::{logsumexp, Var};
use crate::neural::NeuralContext;
use crate::stochastics::sample_index;

/// Clusters enumerated together, with the observation factors they absorb.
#[derive(Debug, Clone)]
pub struct GroupSpec {
    /// Cluster indices in declaration order.
    pub clusters: Vec<usize>,
    /// Variables of those clusters, in cluster then declaration order.
    pub vars: Vec<VarId>,
    pub clamps: Vec<(VarId, Value)>,
    /// Indices into [`StepPlan::factors`] of table factors evaluated here.
    pub tables: Vec<usize>,
    /// Outside values the group's table depends on, in a canonical order.
    pub key_reads: Vec<Access>,
}

impl GroupSpec {
    pub fn has_factors(&self) -> bool {
        !self.clamps.is_empty() || !self.tables.is_empty()
    }

    /// Key for memoising this group's table across particles.
    pub fn key(&self, prev: &[Value], current: &[Value], exo: &[Value]) -> SmallVec<[Value; 12]> {
        self.key_reads
            .iter()
            .map(|a| match *a {
                Access::Prev(v) => prev[v.0],
                Access::Current(v) => current[v.0],
                Access::Exo(i) => exo.get(i).copied().unwrap_or(Value::MIN),
                Access::Choice(_) => unreachable!("choices never leave a cluster"),
            })
            .collect()
    }
}

/// Sampling order of groups for one observation value.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub z: Option<Value>,
    pub groups: Vec<GroupSpec>,
    pub factors: Vec<Factor>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        // keep the smaller index as root for a stable layout
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.0[hi] = lo;
        true
    }
}

impl Model {
    /// The (cached) step plan for observation `z`.
    pub fn plan(&self, z: Option<Value>) -> Result<Arc<StepPlan>> {
        if let Some(p) = self.plans.lock().expect("plan cache poisoned").get(&z) {
            return Ok(p.clone());
        }
        let plan = Arc::new(self.build_plan(z)?);
        self.plans
            .lock()
            .expect("plan cache poisoned")
            .insert(z, plan.clone());
        Ok(plan)
    }

    fn build_plan(&self, z: Option<Value>) -> Result<StepPlan> {
        let schema = &self.schema;
        let nv = schema.num_vars();
        let nc = schema.clusters().len();
        let factors = self.observation.factors(z);
        for f in &factors {
            let vars: Vec<VarId> = match f {
                Factor::Clamp { var, .. } => vec![*var],
                Factor::Table { reads, .. } => reads.clone(),
            };
            if vars.iter().any(|v| v.0 >= nv) {
                return Err(SymbolicError::Schema(format!("factor {f:?} reads unknown variable")));
            }
        }

        let mut determined = vec![false; nv];
        for f in &factors {
            if let Factor::Clamp { var, .. } = f {
                determined[var.0] = true;
            }
        }
        let mut pre_determined = vec![false; nc];
        loop {
            let mut changed = false;
            for c in 0..nc {
                let info = &self.info[c];
                if !pre_determined[c]
                    && !info.has_choices
                    && info.foreign_current.iter().all(|v| determined[v.0])
                {
                    pre_determined[c] = true;
                    for v in &schema.clusters()[c].vars {
                        determined[v.0] = true;
                    }
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        // Which cluster each factor is attached to.
        let mut uf = UnionFind((0..nc).collect());
        let mut anchor = Vec::with_capacity(factors.len());
        for f in &factors {
            match f {
                Factor::Clamp { var, .. } => anchor.push(schema.cluster_of(*var)),
                Factor::Table { reads, .. } => {
                    let open: Vec<usize> = reads
                        .iter()
                        .filter(|v| !determined[v.0])
                        .map(|v| schema.cluster_of(*v))
                        .collect();
                    if let Some(&first) = open.first() {
                        for &c in &open[1..] {
                            uf.union(first, c);
                        }
                        anchor.push(first);
                    } else {
                        anchor.push(reads.iter().map(|v| schema.cluster_of(*v)).max().unwrap_or(0));
                    }
                }
            }
        }
        loop {
            let mut has_factors = vec![false; nc];
            for &a in &anchor {
                let r = uf.find(a);
                has_factors[r] = true;
            }
            let mut changed = false;
            for c in 0..nc {
                let rc = uf.find(c);
                if !has_factors[rc] {
                    continue;
                }
                for v in &self.info[c].foreign_current {
                    if !determined[v.0] && uf.union(c, schema.cluster_of(*v)) {
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }

        // Collect groups keyed by root.
        let mut root_groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for c in 0..nc {
            let r = uf.find(c);
            match root_groups.iter_mut().find(|(rr, _)| *rr == r) {
                Some((_, cs)) => cs.push(c),
                None => root_groups.push((r, vec![c])),
            }
        }
        let mut groups: Vec<Vec<usize>> = root_groups.into_iter().map(|(_, cs)| cs).collect();
        let mut group_factors: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
        let group_of = |groups: &[Vec<usize>], c: usize| {
            groups.iter().position(|g| g.contains(&c)).expect("every cluster grouped")
        };
        for (fi, &a) in anchor.iter().enumerate() {
            group_factors[group_of(&groups, a)].push(fi);
        }

        // Topological order by current-step reads, merging any cycle.
        let deps = |groups: &[Vec<usize>], gf: &[Vec<usize>], g: usize| -> Vec<usize> {
            let mut out = Vec::new();
            let mut add = |v: &VarId| {
                let o = group_of(groups, schema.cluster_of(*v));
                if o != g && !out.contains(&o) {
                    out.push(o);
                }
            };
            for &c in &groups[g] {
                self.info[c].foreign_current.iter().for_each(&mut add);
            }
            for &fi in &gf[g] {
                if let Factor::Table { reads, .. } = &factors[fi] {
                    reads.iter().for_each(&mut add);
                }
            }
            out
        };
        let mut order: Vec<usize> = Vec::new();
        loop {
            let remaining: Vec<usize> = (0..groups.len()).filter(|g| !order.contains(g)).collect();
            if remaining.is_empty() {
                break;
            }
            let ready = remaining
                .iter()
                .copied()
                .find(|&g| deps(&groups, &group_factors, g).iter().all(|d| order.contains(d)));
            match ready {
                Some(g) => order.push(g),
                None => {
                    // cycle: fold every remaining group into the first one
                    let keep = remaining[0];
                    for &g in &remaining[1..] {
                        let cs = std::mem::take(&mut groups[g]);
                        groups[keep].extend(cs);
                        let fs = std::mem::take(&mut group_factors[g]);
                        group_factors[keep].extend(fs);
                    }
                    groups[keep].sort_unstable();
                }
            }
        }

        let mut specs = Vec::new();
        for g in order {
            if groups[g].is_empty() {
                continue;
            }
            let clusters = groups[g].clone();
            let vars: Vec<VarId> = clusters
                .iter()
                .flat_map(|&c| schema.clusters()[c].vars.iter().copied())
                .collect();
            let mut clamps = Vec::new();
            let mut tables = Vec::new();
            for &fi in &group_factors[g] {
                match &factors[fi] {
                    Factor::Clamp { var, value } => clamps.push((*var, *value)),
                    Factor::Table { .. } => tables.push(fi),
                }
            }
            let inside = |v: &VarId| clusters.contains(&schema.cluster_of(*v));
            let mut key_reads: Vec<Access> = Vec::new();
            let mut push = |a: Access| {
                if !key_reads.contains(&a) {
                    key_reads.push(a);
                }
            };
            for &c in &clusters {
                for step in &self.programs[c].steps {
                    for &a in step.reads() {
                        match a {
                            Access::Prev(_) | Access::Exo(_) => push(a),
                            Access::Current(v) if !inside(&v) => push(a),
                            _ => {}
                        }
                    }
                }
            }
            for &fi in &tables {
                if let Factor::Table { reads, .. } = &factors[fi] {
                    for v in reads.iter().filter(|v| !inside(v)) {
                        push(Access::Current(*v));
                    }
                }
            }
            key_reads.sort_by_key(|a| match *a {
                Access::Prev(v) => (0, v.0),
                Access::Current(v) => (1, v.0),
                Access::Exo(i) => (2, i),
                Access::Choice(k) => (3, k),
            });
            specs.push(GroupSpec {
                clusters,
                vars,
                clamps,
                tables,
                key_reads,
            });
        }
        Ok(StepPlan {
            z,
            groups: specs,
            factors,
        })
    }

    /// Exact posterior over one group's variables given the previous state,
    /// the already-assigned current values of other groups, and the plan's
    /// observation.
    #[allow(clippy::too_many_arguments)]
    pub fn group_table<'t>(
        &self,
        plan: &StepPlan,
        g: usize,
        prev: &[Value],
        current: &[Value],
        exo: &[Value],
        ctx: &dyn NeuralContext<'t>,
        cap: usize,
    ) -> Result<GroupTable<'t>> {
        let spec = &plan.groups[g];
        let mut steps = Vec::new();
        for (pos, &c) in spec.clusters.iter().enumerate() {
            for s in &self.programs[c].steps {
                steps.push((pos, s));
            }
        }
        let tables: Vec<&Factor> = spec.tables.iter().map(|&i| &plan.factors[i]).collect();
        let mut dfs = Dfs {
            model: self,
            steps,
            prev,
            exo,
            current: current.to_vec(),
            ctx,
            clamps: &spec.clamps,
            tables,
            choices: vec![SmallVec::new(); spec.clusters.len()],
            vecs: Vec::new(),
            vec_vals: Vec::new(),
            path: SmallVec::new(),
            leaves: Vec::new(),
            group_vars: &spec.vars,
            cap,
        };
        dfs.rec(0, 0.0)?;
        let Dfs { leaves, vecs, vec_vals, .. } = dfs;
        if leaves.is_empty() {
            return Err(SymbolicError::ImpossibleEvidence {
                prev: prev.to_vec(),
                z: plan.z,
            });
        }
        GroupTable::assemble(spec.vars.clone(), leaves, vecs, vec_vals)
    }

    /// Exact conditional of the group containing `cluster`. Groups sampled
    /// before it must be deterministic given `prev` and `exo`.
    pub fn exact_conditional<'t>(
        &self,
        cluster: usize,
        prev: &[Value],
        exo: &[Value],
        z: Option<Value>,
        ctx: &dyn NeuralContext<'t>,
    ) -> Result<ConditionalTable<'t>> {
        let plan = self.plan(z)?;
        let mut current = vec![0; self.schema.num_vars()];
        for g in 0..plan.groups.len() {
            let table = self.group_table(&plan, g, prev, &current, exo, ctx, usize::MAX)?;
            if plan.groups[g].clusters.contains(&cluster) {
                return Ok(table);
            }
            if table.len() != 1 {
                return Err(SymbolicError::Contract(format!(
                    "cluster {cluster} depends on sampled clusters {:?}",
                    plan.groups[g].clusters
                )));
            }
            table.assign(0, &mut current);
        }
        Err(SymbolicError::Contract(format!("no cluster {cluster}")))
    }
}

struct Leaf {
    const_lw: f64,
    idx: SmallVec<[u32; 8]>,
    values: SmallVec<[Value; 8]>,
}

struct Dfs<'a, 't> {
    model: &'a Model,
    steps: Vec<(usize, &'a Step)>,
    prev: &'a [Value],
    exo: &'a [Value],
    current: Vec<Value>,
    ctx: &'a dyn NeuralContext<'t>,
    clamps: &'a [(VarId, Value)],
    tables: Vec<&'a Factor>,
    choices: Vec<SmallVec<[Value; 4]>>,
    vecs: Vec<Var<'t>>,
    vec_vals: Vec<f64>,
    path: SmallVec<[u32; 8]>,
    leaves: Vec<Leaf>,
    group_vars: &'a [VarId],
    cap: usize,
}

impl<'t> Dfs<'_, 't> {
    fn clamp_ok(&self, v: VarId, value: Value) -> bool {
        self.clamps
            .iter()
            .all(|&(cv, cval)| cv != v || cval == value)
    }

    fn rec(&mut self, i: usize, const_lw: f64) -> Result<()> {
        if i == self.steps.len() {
            return self.leaf(const_lw);
        }
        let (pos, step) = self.steps[i];
        let schema = &self.model.schema;
        match step {
            Step::Choice { name, target, reads, dist } => {
                let d = {
                    let scope = Scope {
                        step: name,
                        reads,
                        prev: self.prev,
                        current: &self.current,
                        exo: self.exo,
                        choices: &self.choices[pos],
                    };
                    dist.distribution(&scope, self.ctx)?
                };
                let lps: SmallVec<[f64; 8]> = match &d.log_probs {
                    LogProbs::Point => {
                        if d.labels.len() != 1 {
                            return Err(SymbolicError::Contract(format!(
                                "{name}: point distribution with {} labels",
                                d.labels.len()
                            )));
                        }
                        SmallVec::from_slice(&[0.0])
                    }
                    LogProbs::Const(v) => v.clone(),
                    LogProbs::Var(v) => v.with_values(SmallVec::from_slice),
                };
                if lps.len() != d.labels.len() {
                    return Err(SymbolicError::Contract(format!(
                        "{name}: {} log-probabilities for {} labels",
                        lps.len(),
                        d.labels.len()
                    )));
                }
                let offset = if let LogProbs::Var(v) = &d.log_probs {
                    let off = self.vec_vals.len() as u32;
                    self.vecs.push(*v);
                    self.vec_vals.extend_from_slice(&lps);
                    Some(off)
                } else {
                    None
                };
                for (k, (&label, &lp)) in d.labels.iter().zip(&lps).enumerate() {
                    if lp == f64::NEG_INFINITY {
                        continue;
                    }
                    if let Some(t) = target {
                        schema.check_value(*t, label)?;
                        if !self.clamp_ok(*t, label) {
                            continue;
                        }
                        self.current[t.0] = label;
                    }
                    self.choices[pos].push(label);
                    let next_const = match offset {
                        Some(off) => {
                            self.path.push(off + k as u32);
                            const_lw
                        }
                        None => const_lw + lp,
                    };
                    let r = self.rec(i + 1, next_const);
                    if offset.is_some() {
                        self.path.pop();
                    }
                    self.choices[pos].pop();
                    r?;
                }
                Ok(())
            }
            Step::Rule { name, reads, writes, body } => {
                let out = {
                    let scope = Scope {
                        step: name,
                        reads,
                        prev: self.prev,
                        current: &self.current,
                        exo: self.exo,
                        choices: &self.choices[pos],
                    };
                    body.apply(&scope)?
                };
                if out.len() != writes.len() {
                    return Err(SymbolicError::Contract(format!(
                        "{name} produced {} values for {} writes",
                        out.len(),
                        writes.len()
                    )));
                }
                for (&v, &value) in writes.iter().zip(&out) {
                    schema.check_value(v, value)?;
                    if !self.clamp_ok(v, value) {
                        return Ok(());
                    }
                    self.current[v.0] = value;
                }
                self.rec(i + 1, const_lw)
            }
        }
    }

    fn leaf(&mut self, mut const_lw: f64) -> Result<()> {
        for f in &self.tables {
            if let Factor::Table { name, reads, weight } = f {
                let vals: SmallVec<[Value; 8]> = reads.iter().map(|v| self.current[v.0]).collect();
                let w = weight(&vals);
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(SymbolicError::Contract(format!("factor {name} returned {w}")));
                }
                if w == 0.0 {
                    return Ok(());
                }
                const_lw += w.ln();
            }
        }
        if self.leaves.len() >= self.cap {
            return Err(SymbolicError::CapExceeded(self.cap));
        }
        self.leaves.push(Leaf {
            const_lw,
            idx: self.path.clone(),
            values: self.group_vars.iter().map(|v| self.current[v.0]).collect(),
        });
        Ok(())
    }
}

/// Exact posterior over a group's joint assignments.
///
/// Entries are distinct assignments of the group's variables; several
/// enumeration leaves (e.g. different latent choices reaching the same
/// position) may map to one entry.
pub struct GroupTable<'t> {
    pub vars: Vec<VarId>,
    values: Vec<Value>,
    pub probs: Vec<f64>,
    pub log_z: f64,
    leaf_logw: Vec<f64>,
    leaves_of: Vec<SmallVec<[u32; 4]>>,
    logw_var: Option<Var<'t>>,
    logz_var: Option<Var<'t>>,
    post: RefCell<Vec<Option<Var<'t>>>>,
}

/// Posterior table returned by [`Model::exact_conditional`].
pub type ConditionalTable<'t> = GroupTable<'t>;

impl<'t> GroupTable<'t> {
    fn assemble(
        vars: Vec<VarId>,
        leaves: Vec<Leaf>,
        vecs: Vec<Var<'t>>,
        vec_vals: Vec<f64>,
    ) -> Result<Self> {
        let width = vars.len();
        let depth = leaves.iter().map(|l| l.idx.len()).max().unwrap_or(0);
        let leaf_logw: Vec<f64> = leaves
            .iter()
            .map(|l| {
                let mut w = l.const_lw;
                for k in 0..depth {
                    w += l.idx.get(k).map_or(0.0, |&j| vec_vals[j as usize]);
                }
                w
            })
            .collect();
        let log_z = logsumexp(&leaf_logw);

        let mut index: FxHashMap<&[Value], usize> = FxHashMap::default();
        let mut values = Vec::new();
        let mut leaves_of: Vec<SmallVec<[u32; 4]>> = Vec::new();
        for (li, l) in leaves.iter().enumerate() {
            let e = *index.entry(&l.values[..]).or_insert_with(|| {
                values.extend_from_slice(&l.values);
                leaves_of.push(SmallVec::new());
                leaves_of.len() - 1
            });
            leaves_of[e].push(li as u32);
        }
        let probs: Vec<f64> = leaves_of
            .iter()
            .map(|ls| ls.iter().map(|&l| (leaf_logw[l as usize] - log_z).exp()).sum())
            .collect();

        let (logw_var, logz_var) = if depth > 0 && !vecs.is_empty() {
            let tape = vecs[0].tape();
            let pad = vec_vals.len();
            let mut parts = vecs.clone();
            parts.push(tape.scalar(0.0));
            let all = tape.concat(&parts);
            let consts: Vec<f64> = leaves.iter().map(|l| l.const_lw).collect();
            let mut lw = tape.vector(&consts);
            for k in 0..depth {
                let idx: Vec<usize> = leaves
                    .iter()
                    .map(|l| l.idx.get(k).map_or(pad, |&j| j as usize))
                    .collect();
                lw = lw + all.gather(&idx);
            }
            let lz = lw.logsumexp();
            (Some(lw), Some(lz))
        } else {
            (None, None)
        };
        debug_assert_eq!(values.len(), width * leaves_of.len());
        let n = leaves_of.len();
        Ok(Self {
            vars,
            values,
            probs,
            log_z,
            leaf_logw,
            leaves_of,
            logw_var,
            logz_var,
            post: RefCell::new(vec![None; n]),
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Values of entry `j`, aligned with [`GroupTable::vars`].
    pub fn entry(&self, j: usize) -> &[Value] {
        let w = self.vars.len();
        &self.values[j * w..(j + 1) * w]
    }

    /// Writes entry `j` into a full state vector.
    pub fn assign(&self, j: usize, state: &mut [Value]) {
        for (v, &x) in self.vars.iter().zip(self.entry(j)) {
            state[v.0] = x;
        }
    }

    /// Inverse-CDF draw with uniform `u`.
    pub fn sample(&self, u: f64) -> usize {
        sample_index(&self.probs, u)
    }

    pub fn log_prob(&self, j: usize) -> f64 {
        let lw: Vec<f64> = self.leaves_of[j]
            .iter()
            .map(|&l| self.leaf_logw[l as usize])
            .collect();
        logsumexp(&lw) - self.log_z
    }

    /// Whether the table carries differentiable quantities.
    pub fn is_differentiable(&self) -> bool {
        self.logw_var.is_some()
    }

    /// Differentiable log-evidence `log sum prior * likelihood`.
    pub fn log_evidence_var(&self) -> Option<Var<'t>> {
        self.logz_var
    }

    /// Differentiable log posterior probability of entry `j` (memoised).
    pub fn log_posterior_var(&self, j: usize) -> Option<Var<'t>> {
        let lw = self.logw_var?;
        if let Some(v) = self.post.borrow()[j] {
            return Some(v);
        }
        let ls = &self.leaves_of[j];
        let num = if ls.len() == 1 {
            lw.pick(ls[0] as usize)
        } else {
            let idx: Vec<usize> = ls.iter().map(|&l| l as usize).collect();
            lw.gather(&idx).logsumexp()
        };
        let v = num - self.logz_var.expect("set with logw");
        self.post.borrow_mut()[j] = Some(v);
        Some(v)
    }

    /// Differentiable posterior probability of entry `j`.
    pub fn posterior_var(&self, j: usize) -> Option<Var<'t>> {
        self.log_posterior_var(j).map(Var::exp)
    }
}

impl std::fmt::Debug for GroupTable<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let rows: Vec<(&[Value], f64)> = (0..self.len()).map(|j| (self.entry(j), self.probs[j])).collect();
        f.debug_struct("GroupTable")
            .field("vars", &self.vars)
            .field("log_z", &self.log_z)
            .field("entries", &rows)
            .finish()
    }
}
