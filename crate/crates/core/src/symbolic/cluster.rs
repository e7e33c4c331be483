use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use smallvec::SmallVec;

use super::engine::StepPlan;
use super::{DomainKind, Result, Schema, SymbolicError, Value, VarId};
use crate::neural::{NeuralContext, Output};
use crate::stochastics::{sigmoid, softmax};

/// A value a step may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Access {
    /// Variable at the previous time step.
    Prev(VarId),
    /// Variable at the current time step (earlier cluster or earlier step).
    Current(VarId),
    /// Exogenous input by index.
    Exo(usize),
    /// Value of the k-th choice point of the same cluster.
    Choice(usize),
}

/// Read access for one step, restricted to its declared reads.
pub struct Scope<'a> {
    pub(crate) step: &'a str,
    pub(crate) reads: &'a [Access],
    pub(crate) prev: &'a [Value],
    pub(crate) current: &'a [Value],
    pub(crate) exo: &'a [Value],
    pub(crate) choices: &'a [Value],
}

impl Scope<'_> {
    fn check(&self, a: Access) -> Result<()> {
        if self.reads.contains(&a) {
            Ok(())
        } else {
            Err(SymbolicError::UndeclaredAccess {
                step: self.step.to_string(),
                access: a,
            })
        }
    }

    pub fn prev(&self, v: VarId) -> Result<Value> {
        self.check(Access::Prev(v))?;
        Ok(self.prev[v.0])
    }

    pub fn current(&self, v: VarId) -> Result<Value> {
        self.check(Access::Current(v))?;
        Ok(self.current[v.0])
    }

    pub fn exo(&self, i: usize) -> Result<Value> {
        self.check(Access::Exo(i))?;
        self.exo.get(i).copied().ok_or_else(|| {
            SymbolicError::Contract(format!("{} reads missing exogenous input {i}", self.step))
        })
    }

    pub fn choice(&self, k: usize) -> Result<Value> {
        self.check(Access::Choice(k))?;
        Ok(self.choices[k])
    }

    pub fn read(&self, a: Access) -> Result<Value> {
        match a {
            Access::Prev(v) => self.prev(v),
            Access::Current(v) => self.current(v),
            Access::Exo(i) => self.exo(i),
            Access::Choice(k) => self.choice(k),
        }
    }
}

/// Normalised log-probabilities of a finite distribution.
#[derive(Debug, Clone)]
pub enum LogProbs<'t> {
    /// Single label with probability one.
    Point,
    Const(SmallVec<[f64; 8]>),
    Var(crate::diffcore::Var<'t>),
}

#[derive(Debug, Clone)]
pub struct FiniteDist<'t> {
    pub labels: SmallVec<[Value; 8]>,
    pub log_probs: LogProbs<'t>,
}

impl<'t> FiniteDist<'t> {
    pub fn point(v: Value) -> Self {
        Self {
            labels: SmallVec::from_slice(&[v]),
            log_probs: LogProbs::Point,
        }
    }

    /// Constant distribution from probabilities (normalised here).
    pub fn constant(labels: &[Value], probs: &[f64]) -> Result<Self> {
        if labels.len() != probs.len() || labels.is_empty() {
            return Err(SymbolicError::Contract(format!(
                "{} labels for {} probabilities",
                labels.len(),
                probs.len()
            )));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) || total <= 0.0 {
            return Err(SymbolicError::Contract(format!("invalid probabilities {probs:?}")));
        }
        Ok(Self {
            labels: SmallVec::from_slice(labels),
            log_probs: LogProbs::Const(probs.iter().map(|p| (p / total).ln()).collect()),
        })
    }

    /// Uniform over `labels`.
    pub fn uniform(labels: &[Value]) -> Self {
        let lp = -(labels.len() as f64).ln();
        Self {
            labels: SmallVec::from_slice(labels),
            log_probs: LogProbs::Const(SmallVec::from_elem(lp, labels.len())),
        }
    }

    /// From normalised log-probabilities produced by a neural context.
    pub fn from_log_probs(labels: &[Value], out: Output<'t>) -> Result<Self> {
        let n = out.with_values(<[f64]>::len);
        if n != labels.len() {
            return Err(SymbolicError::Contract(format!(
                "{n} log-probabilities for {} labels",
                labels.len()
            )));
        }
        let log_probs = match out {
            Output::Const(v) => LogProbs::Const(v.iter().copied().collect()),
            Output::Var(v) => LogProbs::Var(v),
        };
        Ok(Self {
            labels: SmallVec::from_slice(labels),
            log_probs,
        })
    }

    /// From unnormalised logits.
    pub fn from_logits(labels: &[Value], logits: Output<'t>) -> Result<Self> {
        match logits {
            Output::Const(v) => {
                let p = softmax(&v);
                Self::constant(labels, &p)
            }
            Output::Var(v) => Self::from_log_probs(labels, Output::Var(v.log_softmax())),
        }
    }

    /// Labels `[1, 0]` with `P(1) = sigmoid(logit)`.
    pub fn bernoulli(logit: Output<'t>) -> Result<Self> {
        match logit {
            Output::Const(v) => {
                let p = sigmoid(v[0]);
                Ok(Self {
                    labels: SmallVec::from_slice(&[1, 0]),
                    log_probs: LogProbs::Const(SmallVec::from_slice(&[
                        p.ln(),
                        sigmoid(-v[0]).ln(),
                    ])),
                })
            }
            Output::Var(l) => {
                let tape = l.tape();
                let both = tape.concat(&[l, tape.scalar(0.0)]).log_softmax();
                Self::from_log_probs(&[1, 0], Output::Var(both))
            }
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        match &self.log_probs {
            LogProbs::Point => vec![1.0],
            LogProbs::Const(v) => v.iter().map(|x| x.exp()).collect(),
            LogProbs::Var(v) => v.with_values(|x| x.iter().map(|l| l.exp()).collect()),
        }
    }
}

/// Constructor of a choice point's distribution.
pub trait ChoiceDistribution: Send + Sync {
    fn distribution<'t>(
        &self,
        scope: &Scope<'_>,
        ctx: &dyn NeuralContext<'t>,
    ) -> Result<FiniteDist<'t>>;
}

/// Body of a deterministic rule: one value per declared write.
pub trait RuleBody: Send + Sync {
    fn apply(&self, scope: &Scope<'_>) -> Result<SmallVec<[Value; 4]>>;
}

/// Rule body from a closure.
pub struct FnRule<F>(pub F);

impl<F> RuleBody for FnRule<F>
where
    F: Fn(&Scope<'_>) -> Result<SmallVec<[Value; 4]>> + Send + Sync,
{
    fn apply(&self, scope: &Scope<'_>) -> Result<SmallVec<[Value; 4]>> {
        (self.0)(scope)
    }
}

/// Parameter-free distribution, optionally a conditional table indexed by
/// the value of one read.
#[derive(Debug, Clone)]
pub struct ConstDist {
    labels: Vec<Value>,
    rows: Vec<Vec<f64>>,
    row_by: Option<Access>,
}

impl ConstDist {
    pub fn new(labels: &[Value], probs: &[f64]) -> Self {
        Self {
            labels: labels.to_vec(),
            rows: vec![probs.to_vec()],
            row_by: None,
        }
    }

    /// Row `r` is used when the read value equals `r`.
    pub fn table(labels: &[Value], row_by: Access, rows: Vec<Vec<f64>>) -> Self {
        Self {
            labels: labels.to_vec(),
            rows,
            row_by: Some(row_by),
        }
    }
}

fn row_index(scope: &Scope<'_>, row_by: Option<Access>, rows: usize) -> Result<usize> {
    let r = match row_by {
        None => 0,
        Some(a) => scope.read(a)?,
    };
    if r < 0 || r as usize >= rows {
        return Err(SymbolicError::Contract(format!(
            "{} has no row for value {r}",
            scope.step
        )));
    }
    Ok(r as usize)
}

impl ChoiceDistribution for ConstDist {
    fn distribution<'t>(&self, scope: &Scope<'_>, _: &dyn NeuralContext<'t>) -> Result<FiniteDist<'t>> {
        let r = row_index(scope, self.row_by, self.rows.len())?;
        FiniteDist::constant(&self.labels, &self.rows[r])
    }
}

/// Categorical whose logits are a named parameter: one block of `K` logits
/// per row.
#[derive(Debug, Clone)]
pub struct ParamCategorical {
    pub param: String,
    pub labels: Vec<Value>,
    pub row_by: Option<Access>,
}

impl ChoiceDistribution for ParamCategorical {
    fn distribution<'t>(&self, scope: &Scope<'_>, ctx: &dyn NeuralContext<'t>) -> Result<FiniteDist<'t>> {
        let k = self.labels.len();
        let p = ctx.parameter(&self.param)?;
        let total = p.with_values(<[f64]>::len);
        if k == 0 || total % k != 0 {
            return Err(SymbolicError::Contract(format!(
                "{} has {total} logits for {k} labels",
                self.param
            )));
        }
        let r = row_index(scope, self.row_by, total / k)?;
        let logits = match p {
            Output::Const(v) => Output::Const(v[r * k..(r + 1) * k].into()),
            Output::Var(v) if total == k => Output::Var(v),
            Output::Var(v) => Output::Var(v.gather(&(r * k..(r + 1) * k).collect::<Vec<_>>())),
        };
        FiniteDist::from_logits(&self.labels, logits)
    }
}

/// Bernoulli (labels `[1, 0]`) whose logit is a named parameter, optionally
/// one logit per row.
#[derive(Debug, Clone)]
pub struct ParamBernoulli {
    pub param: String,
    pub row_by: Option<Access>,
}

impl ChoiceDistribution for ParamBernoulli {
    fn distribution<'t>(&self, scope: &Scope<'_>, ctx: &dyn NeuralContext<'t>) -> Result<FiniteDist<'t>> {
        let p = ctx.parameter(&self.param)?;
        let total = p.with_values(<[f64]>::len);
        let r = row_index(scope, self.row_by, total)?;
        let logit = match p {
            Output::Const(v) => Output::Const(v[r..r + 1].into()),
            Output::Var(v) if v.shape().is_scalar() => Output::Var(v),
            Output::Var(v) => Output::Var(v.pick(r)),
        };
        FiniteDist::bernoulli(logit)
    }
}

#[derive(Clone)]
pub enum Step {
    Choice {
        name: String,
        target: Option<VarId>,
        reads: Vec<Access>,
        dist: Arc<dyn ChoiceDistribution>,
    },
    Rule {
        name: String,
        reads: Vec<Access>,
        writes: Vec<VarId>,
        body: Arc<dyn RuleBody>,
    },
}

impl Step {
    pub fn name(&self) -> &str {
        match self {
            Step::Choice { name, .. } | Step::Rule { name, .. } => name,
        }
    }

    pub fn reads(&self) -> &[Access] {
        match self {
            Step::Choice { reads, .. } | Step::Rule { reads, .. } => reads,
        }
    }

    fn writes(&self) -> SmallVec<[VarId; 4]> {
        match self {
            Step::Choice { target, .. } => target.iter().copied().collect(),
            Step::Rule { writes, .. } => writes.iter().copied().collect(),
        }
    }
}

impl fmt::Debug for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Choice { name, target, reads, .. } => f
                .debug_struct("Choice")
                .field("name", name)
                .field("target", target)
                .field("reads", reads)
                .finish(),
            Step::Rule { name, reads, writes, .. } => f
                .debug_struct("Rule")
                .field("name", name)
                .field("reads", reads)
                .field("writes", writes)
                .finish(),
        }
    }
}

/// Ordered choice points and rules defining one cluster's transition.
#[derive(Debug, Clone, Default)]
pub struct ClusterProgram {
    pub(crate) steps: Vec<Step>,
}

impl ClusterProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn choice(
        mut self,
        name: &str,
        target: Option<VarId>,
        reads: Vec<Access>,
        dist: impl ChoiceDistribution + 'static,
    ) -> Self {
        self.steps.push(Step::Choice {
            name: name.to_string(),
            target,
            reads,
            dist: Arc::new(dist),
        });
        self
    }

    pub fn rule(
        mut self,
        name: &str,
        reads: Vec<Access>,
        writes: Vec<VarId>,
        body: impl RuleBody + 'static,
    ) -> Self {
        self.steps.push(Step::Rule {
            name: name.to_string(),
            reads,
            writes,
            body: Arc::new(body),
        });
        self
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn num_choices(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s, Step::Choice { .. }))
            .count()
    }
}

pub type WeightFn = Arc<dyn Fn(&[Value]) -> f64 + Send + Sync>;

/// One multiplicative term of the observation likelihood.
#[derive(Clone)]
pub enum Factor {
    /// Indicator that `var == value`.
    Clamp { var: VarId, value: Value },
    /// Non-negative weight of the values of `reads`.
    Table {
        name: String,
        reads: Vec<VarId>,
        weight: WeightFn,
    },
}

impl fmt::Debug for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Clamp { var, value } => write!(f, "Clamp({var:?} = {value})"),
            Factor::Table { name, reads, .. } => write!(f, "Table({name}, {reads:?})"),
        }
    }
}

/// Likelihood `p(z | state)` and its decomposition into factors.
pub trait ObservationModel: Send + Sync {
    /// Factors whose product equals `likelihood(state, z)` for every state.
    fn factors(&self, z: Option<Value>) -> Vec<Factor>;

    /// The joint likelihood, used as the reference by validators.
    fn likelihood(&self, state: &[Value], z: Option<Value>) -> f64 {
        self.factors(z)
            .iter()
            .map(|f| match f {
                Factor::Clamp { var, value } => f64::from(u8::from(state[var.0] == *value)),
                Factor::Table { reads, weight, .. } => {
                    let vals: SmallVec<[Value; 8]> = reads.iter().map(|r| state[r.0]).collect();
                    weight(&vals)
                }
            })
            .product()
    }
}

/// No observations: every likelihood is one.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoObservation;

impl ObservationModel for NoObservation {
    fn factors(&self, _: Option<Value>) -> Vec<Factor> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ClusterInfo {
    /// Current-step variables of other clusters read by any step.
    pub(crate) foreign_current: Vec<VarId>,
    pub(crate) has_choices: bool,
}

/// Schema, cluster programs and observation model.
pub struct Model {
    pub(crate) schema: Arc<Schema>,
    pub(crate) programs: Vec<ClusterProgram>,
    pub(crate) observation: Arc<dyn ObservationModel>,
    pub(crate) info: Vec<ClusterInfo>,
    pub(crate) plans: Mutex<HashMap<Option<Value>, Arc<StepPlan>>>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("schema", &self.schema)
            .field("programs", &self.programs)
            .finish()
    }
}

impl Model {
    /// Validates the declared read/write structure of every program.
    pub fn new(
        schema: Arc<Schema>,
        programs: Vec<ClusterProgram>,
        observation: Arc<dyn ObservationModel>,
    ) -> Result<Self> {
        if let Some(v) = schema.vars().iter().find(|v| v.kind == DomainKind::Infinite) {
            return Err(SymbolicError::UnsupportedDomain(v.name.clone()));
        }
        let nc = schema.clusters().len();
        if programs.len() != nc {
            return Err(SymbolicError::Schema(format!(
                "{} programs for {nc} clusters",
                programs.len()
            )));
        }
        let mut writer = vec![None::<usize>; schema.num_vars()];
        let mut info = Vec::with_capacity(nc);
        for (ci, prog) in programs.iter().enumerate() {
            let mut written: Vec<VarId> = Vec::new();
            let mut choices = 0usize;
            let mut foreign = Vec::new();
            for step in &prog.steps {
                for &a in step.reads() {
                    match a {
                        Access::Prev(v) | Access::Current(v) if v.0 >= schema.num_vars() => {
                            return Err(SymbolicError::Schema(format!(
                                "{} reads unknown variable {v:?}",
                                step.name()
                            )))
                        }
                        Access::Current(v) => {
                            let owner = schema.cluster_of(v);
                            if owner == ci {
                                if !written.contains(&v) {
                                    return Err(SymbolicError::Schema(format!(
                                        "{} reads {} before it is written",
                                        step.name(),
                                        schema.var(v).name
                                    )));
                                }
                            } else if owner > ci {
                                return Err(SymbolicError::Schema(format!(
                                    "{} reads current {} of a later cluster",
                                    step.name(),
                                    schema.var(v).name
                                )));
                            } else if !foreign.contains(&v) {
                                foreign.push(v);
                            }
                        }
                        Access::Exo(i) if i >= schema.exogenous().len() => {
                            return Err(SymbolicError::Schema(format!(
                                "{} reads unknown exogenous input {i}",
                                step.name()
                            )))
                        }
                        Access::Choice(k) if k >= choices => {
                            return Err(SymbolicError::Schema(format!(
                                "{} reads choice {k} before it is made",
                                step.name()
                            )))
                        }
                        _ => {}
                    }
                }
                for v in step.writes() {
                    if v.0 >= schema.num_vars() || schema.cluster_of(v) != ci {
                        return Err(SymbolicError::Schema(format!(
                            "{} writes a variable outside its cluster",
                            step.name()
                        )));
                    }
                    if let Some(other) = writer[v.0] {
                        return Err(SymbolicError::Schema(format!(
                            "{} written twice (clusters {other} and {ci})",
                            schema.var(v).name
                        )));
                    }
                    writer[v.0] = Some(ci);
                    written.push(v);
                }
                if matches!(step, Step::Choice { .. }) {
                    choices += 1;
                }
            }
            info.push(ClusterInfo {
                foreign_current: foreign,
                has_choices: choices > 0,
            });
        }
        if let Some(i) = writer.iter().position(Option::is_none) {
            return Err(SymbolicError::Schema(format!(
                "{} is never written",
                schema.vars()[i].name
            )));
        }
        Ok(Self {
            schema,
            programs,
            observation,
            info,
            plans: Mutex::new(HashMap::new()),
        })
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn programs(&self) -> &[ClusterProgram] {
        &self.programs
    }

    pub fn observation(&self) -> &Arc<dyn ObservationModel> {
        &self.observation
    }

    /// Same programs with a different observation model.
    pub fn with_observation(&self, observation: Arc<dyn ObservationModel>) -> Result<Self> {
        Self::new(self.schema.clone(), self.programs.clone(), observation)
    }
}
