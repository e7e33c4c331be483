use std::collections::BTreeMap;
use std::fmt;

use clap::ValueEnum;

use super::Result;
use crate::diffcore::{grad_check, Tape, Var};
use crate::enemyroom::{
    init_params, Action, EnemyRoom, HitCoupling, Trajectory, CALIBRATED_THETA, HIT_LOGIT, POLICY_NET,
};
use crate::gradients::{categorical_chain, log_derivative_check, rloo_unbiasedness, UnbiasednessReport};
use crate::inference::{
    exact_forward_hmm, exact_forward_model, rao_blackwell_filtered, rbpf_step, HmmSpec, ParticleBelief,
};
use crate::neural::{BoundMlp, FrozenContext, MlpSpec, ParamStore, Tensor};
use crate::stochastics::RngKey;
use crate::symbolic::{validate_clusters, ValidationInstance, ValidationReport, Value, DEFAULT_JOINT_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Gradcheck,
    Oracle,
    Clusters,
    Logderiv,
    Rloo,
}

/// Outcome of one suite: pass flag plus human-readable lines.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub lines: Vec<String>,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        let name = self.suite.to_possible_value().expect("no skipped variants");
        write!(f, "{}: {}", name.get_name(), if self.passed { "PASS" } else { "FAIL" })
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let key = RngKey::new(seed);
    let (passed, lines) = match suite {
        Suite::Gradcheck => {
            let r = gradcheck_suite(100, &key);
            let worst = r.values().copied().fold(0.0, f64::max);
            let mut lines: Vec<String> = r.iter().map(|(k, v)| format!("{k:<14} max rel err {v:.3e}")).collect();
            lines.push(format!("worst {worst:.3e} (limit 1e-5)"));
            (worst < 1e-5, lines)
        }
        Suite::Oracle => {
            let hmm = hmm_oracle(10_000, &key)?;
            let room = room_oracle(10_000, &key)?;
            let hmm_worst = hmm.iter().copied().fold(0.0, f64::max);
            let room_worst = room.tv_rb.iter().copied().fold(0.0, f64::max);
            let lines = vec![
                format!("hmm tv per step {hmm:.4?}"),
                format!("room tv per step {:.4?}", room.tv),
                format!("room rao-blackwellised tv per step {:.4?}", room.tv_rb),
                format!(
                    "room death exact {:.5} estimate {:.5} se {:.5}",
                    room.death_exact, room.death_estimate, room.death_se
                ),
            ];
            (hmm_worst < 0.02 && room_worst < 0.02 && room.death_within(3.0), lines)
        }
        Suite::Clusters => {
            let mut lines = Vec::new();
            let mut ok = true;
            for e in [1, 2] {
                let r = clusters_suite(5, e, HitCoupling::Union, 200, &key)?;
                lines.push(format!(
                    "E={e}: {} instances, max tv {:.3e}, max log-evidence gap {:.3e}, impossible {}",
                    r.trials, r.max_tv, r.max_log_evidence_gap, r.impossible
                ));
                ok &= r.passed();
            }
            let broken = clusters_suite(5, 2, HitCoupling::EachEnemy, 200, &key)?;
            lines.push(format!(
                "per-enemy clamp on a shared observation: max tv {:.3e} ({})",
                broken.max_tv,
                if broken.passed() { "not detected" } else { "detected" }
            ));
            (ok && !broken.passed(), lines)
        }
        Suite::Logderiv => {
            let worst = logderiv_suite(&key)?;
            (worst < 1e-9, vec![format!("max |lhs - rhs| {worst:.3e} (limit 1e-9)")])
        }
        Suite::Rloo => {
            let r = rloo_suite(10_000, 4, &key)?;
            let reduced = r.variance_reduced().unwrap_or(false);
            let lines = vec![
                format!("exact {:.5?}", r.exact),
                format!("rloo mean {:.5?} se {:.5?}", r.estimator.mean, r.estimator.std_error),
                format!("max z {:.3}", r.max_z()),
                format!(
                    "variance rloo {:.4?} reinforce {:.4?}",
                    r.estimator.variance,
                    r.reinforce.as_ref().map(|s| s.variance.clone()).unwrap_or_default()
                ),
            ];
            (r.max_z() < 3.0 && reduced, lines)
        }
    };
    Ok(SuiteReport { suite, passed, lines })
}

type Case = for<'t> fn(&'t Tape, Var<'t>) -> Var<'t>;

fn weights<'t>(tape: &'t Tape, n: usize) -> Var<'t> {
    tape.vector(&(0..n).map(|i| 0.3 + 0.2 * i as f64).collect::<Vec<_>>())
}

fn range(a: usize, b: usize) -> Vec<usize> {
    (a..b).collect()
}

/// Manual `3 -> 5 -> 4 -> 2` relu MLP whose input and weights all come
/// from `x` (57 entries), read out as one log-softmax entry.
fn mlp_case<'t>(_: &'t Tape, x: Var<'t>) -> Var<'t> {
    let sizes = [3, 5, 4, 2];
    let mut off = 3;
    let mut h = x.gather(&range(0, 3));
    for (k, w) in sizes.windows(2).enumerate() {
        let (i, o) = (w[0], w[1]);
        let m = x.gather(&range(off, off + i * o));
        off += i * o;
        let b = x.gather(&range(off, off + o));
        off += o;
        h = m.matvec(o, h) + b;
        if k + 2 < sizes.len() {
            h = h.relu();
        }
    }
    h.log_softmax().pick(0)
}

/// Worst relative gradient error per case over `points` random points.
pub fn gradcheck_suite(points: usize, key: &RngKey) -> BTreeMap<String, f64> {
    let cases: [(&str, usize, Case); 17] = [
        ("add", 4, |_, x| (x.pick(0) + x.pick(1)) * x.pick(2)),
        ("sub", 4, |_, x| (x.pick(0) - x.pick(3)).exp()),
        ("mul", 4, |t, x| (x * x.exp()).dot(weights(t, 4))),
        ("neg", 4, |_, x| (-x).exp().sum()),
        ("exp", 4, |t, x| x.exp().dot(weights(t, 4))),
        ("log", 4, |t, x| (x * x + t.scalar(0.5)).ln().dot(weights(t, 4))),
        ("relu", 4, |t, x| x.relu().dot(weights(t, 4)) * x.pick(0)),
        ("dot", 4, |_, x| x.dot(x.exp())),
        ("matvec", 6, |_, x| x.gather(&range(0, 4)).matvec(2, x.gather(&range(4, 6))).exp().sum()),
        ("sum", 4, |_, x| x.exp().sum().ln()),
        ("logsumexp", 4, |_, x| (x * x).logsumexp()),
        ("gather", 5, |t, x| x.gather(&[4, 0, 4]).exp().dot(weights(t, 3))),
        ("pick", 4, |_, x| x.pick(2).exp() * x.pick(1)),
        ("scale", 4, |_, x| x.scale(-1.7).exp().sum()),
        ("log_softmax", 4, |_, x| x.log_softmax().pick(1) * x.pick(3)),
        ("concat", 3, |t, x| t.concat(&[x.exp(), x.pick(0), x]).dot(weights(t, 7))),
        ("mlp_2_hidden", 57, mlp_case),
    ];
    let mut out = BTreeMap::new();
    for (c, (name, dim, f)) in cases.iter().enumerate() {
        let ck = key.split(c as u64);
        let worst = (0..points)
            .map(|p| {
                let pk = ck.split(p as u64);
                let x: Vec<f64> = (0..*dim).map(|i| 4.0 * pk.uniform(i as u64) - 2.0).collect();
                grad_check(f, &x, 1e-6)
            })
            .fold(0.0, f64::max);
        out.insert((*name).to_string(), worst);
    }
    // The stored-parameter network, differentiated with respect to its input.
    let mk = key.split(100);
    let store = ParamStore::init(&MlpSpec::policy(6, 8), POLICY_NET, mk.split(0)).expect("valid spec");
    let worst = (0..points)
        .map(|p| {
            let pk = mk.split(1).split(p as u64);
            let x: Vec<f64> = (0..6).map(|i| 4.0 * pk.uniform(i as u64) - 2.0).collect();
            grad_check(
                |t, x| {
                    let net = BoundMlp::bind(t, &store, POLICY_NET).expect("bound");
                    net.forward(x).expect("shape").pick(3)
                },
                &x,
                1e-6,
            )
        })
        .fold(0.0, f64::max);
    out.insert("policy_network".to_string(), worst);
    out
}

fn two_state_hmm() -> HmmSpec {
    HmmSpec {
        init: vec![0.5, 0.5],
        transition: vec![vec![0.7, 0.3], vec![0.3, 0.7]],
        emission: vec![vec![0.1, 0.9], vec![0.8, 0.2]],
    }
}

fn tv_maps(p: &BTreeMap<Vec<Value>, f64>, q: &BTreeMap<Vec<Value>, f64>) -> f64 {
    let mut d = 0.0;
    for (k, a) in p {
        d += (a - q.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, b) in q {
        if !p.contains_key(k) {
            d += b.abs();
        }
    }
    0.5 * d
}

fn weighted_histogram(b: &ParticleBelief<'_>) -> Result<BTreeMap<Vec<Value>, f64>> {
    let w = b.normalized_weights()?;
    let mut h = BTreeMap::new();
    for (s, w) in b.particles.iter().zip(w) {
        if w > 0.0 {
            *h.entry(s.values.clone()).or_insert(0.0) += w;
        }
    }
    Ok(h)
}

/// Total variation between RBPF and the forward algorithm on a two-state
/// HMM, per step.
pub fn hmm_oracle(n: usize, key: &RngKey) -> Result<Vec<f64>> {
    let spec = two_state_hmm();
    let zs = [Some(1), Some(1), Some(0), Some(1), Some(0)];
    let exact = exact_forward_hmm(&spec, &zs.map(|z| z.map(|v: Value| v as usize)))?;
    let (model, init) = spec.to_model()?;
    let store = ParamStore::new();
    let ctx = FrozenContext::new(&store);
    let k = key.split(1);
    let mut b = ParticleBelief::sample_initial(model.schema(), &init, n, k.split(0), None, false)?;
    let mut out = Vec::new();
    for (t, z) in zs.iter().enumerate() {
        b = rbpf_step(b, &model, &[], *z, &ctx, k.split(t as u64 + 1))?;
        let h = weighted_histogram(&b)?;
        let q: BTreeMap<Vec<Value>, f64> = exact.filtered[t + 1]
            .iter()
            .enumerate()
            .map(|(s, p)| (vec![s as Value], *p))
            .collect();
        out.push(tv_maps(&h, &q));
    }
    Ok(out)
}

/// Fixed 3 x 3 instance with a hit at every step.
pub fn oracle_instance() -> Trajectory {
    Trajectory {
        n: 3,
        t: 4,
        e: 1,
        agent_start: [2, 2],
        actions: vec![Action::Up, Action::Right, Action::Down, Action::Left],
        hit_obs: vec![true, true, true, true],
        label: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomOracleReport {
    /// Weighted particle histogram against the exact filter, per step.
    pub tv: Vec<f64>,
    /// Same with the Rao-Blackwellised estimate.
    pub tv_rb: Vec<f64>,
    pub death_exact: f64,
    pub death_estimate: f64,
    pub death_se: f64,
}

impl RoomOracleReport {
    pub fn death_within(&self, k: f64) -> bool {
        let d = (self.death_estimate - self.death_exact).abs();
        d <= k * self.death_se || d < 1e-12
    }
}

/// Parameters for the oracle comparisons: a random policy and the
/// calibrated hit probability.
pub fn oracle_params(key: &RngKey) -> Result<ParamStore> {
    let mut store = init_params(key.split(7))?;
    let logit = (CALIBRATED_THETA / (1.0 - CALIBRATED_THETA)).ln();
    store.insert(HIT_LOGIT, Tensor::scalar(logit));
    Ok(store)
}

/// RBPF against exact forward filtering over full states of [`oracle_instance`].
pub fn room_oracle(n: usize, key: &RngKey) -> Result<RoomOracleReport> {
    let traj = oracle_instance();
    let room = EnemyRoom::new(traj.n, traj.e)?;
    let store = oracle_params(key)?;
    let ctx = FrozenContext::new(&store);
    let init = room.initial(traj.start());
    let exos = EnemyRoom::exos(&traj);
    let zs = EnemyRoom::observations(&traj);
    let exact = exact_forward_model(&room.model, &init, &exos, &zs, &ctx, 1 << 20)?;
    let k = key.split(2);
    let mut b = ParticleBelief::sample_initial(room.model.schema(), &init, n, k.split(0), None, false)?;
    let mut tv = Vec::new();
    let mut tv_rb = Vec::new();
    for t in 0..traj.t {
        let rb = rao_blackwell_filtered(&b, &room.model, &exos[t], zs[t], &ctx)?;
        tv_rb.push(tv_maps(&rb, &exact.filtered[t + 1]));
        b = rbpf_step(b, &room.model, &exos[t], zs[t], &ctx, k.split(t as u64 + 1))?;
        tv.push(tv_maps(&weighted_histogram(&b)?, &exact.filtered[t + 1]));
    }
    let q = b.query_expectation(|_, s| f64::from(u8::from(room.is_dead(&s.values))))?;
    Ok(RoomOracleReport {
        tv,
        tv_rb,
        death_exact: exact.probability(traj.t, |s| room.is_dead(s)),
        death_estimate: q.mean,
        death_se: q.std_error,
    })
}

/// Factorised against direct joint posteriors on random room states.
pub fn clusters_suite(
    n: i64,
    e: usize,
    coupling: HitCoupling,
    trials: usize,
    key: &RngKey,
) -> Result<ValidationReport> {
    let room = EnemyRoom::with_coupling(n, e, 12, 4, coupling)?;
    let store = oracle_params(key)?;
    let ctx = FrozenContext::new(&store);
    let nv = room.model.schema().num_vars();
    let v = room.vars.clone();
    let sample = |k: &RngKey| {
        let mut s = k.stream();
        let mut prev = vec![0; nv];
        let cell = |s: &mut crate::stochastics::RngStream| 1 + s.below(n as u64) as Value;
        prev[v.ax.0] = cell(&mut s);
        prev[v.ay.0] = cell(&mut s);
        for j in 0..e {
            prev[v.ex[j].0] = cell(&mut s);
            prev[v.ey[j].0] = cell(&mut s);
            prev[v.hit[j].0] = s.below(2) as Value;
        }
        prev[v.hp.0] = s.below(13) as Value;
        let exo = vec![s.below(4) as Value];
        let z = match s.below(3) {
            0 => None,
            1 => Some(0),
            _ => Some(1),
        };
        ValidationInstance { prev, exo, z }
    };
    Ok(validate_clusters(&room.model, trials, key.split(3), sample, &ctx)?)
}

/// Worst deviation of the log-derivative identity over the two- and
/// three-state chains.
pub fn logderiv_suite(key: &RngKey) -> Result<f64> {
    let (m, init, store) = categorical_chain(2, vec![vec![0.1, 0.9], vec![0.8, 0.2]], key.split(4));
    let mut worst = log_derivative_check(&m, &init, &[], &[Some(1)], &store, 1, DEFAULT_JOINT_CAP)?.max_abs_deviation;
    let em = vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.5, 0.5]];
    let (m, init, store) = categorical_chain(3, em, key.split(5));
    for zs in [[Some(1), Some(0)], [None, Some(1)], [Some(0), None]] {
        for t in 1..=2 {
            let r = log_derivative_check(&m, &init, &[], &zs, &store, t, DEFAULT_JOINT_CAP)?;
            worst = worst.max(r.max_abs_deviation);
        }
    }
    Ok(worst)
}

/// Parameters `b = (0.4, -1.1)` of the two-step chain.
pub fn chain_params() -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(
        "b",
        Tensor {
            rows: 2,
            cols: 1,
            data: vec![0.4, -1.1],
        },
    );
    s
}

pub fn rloo_suite(batches: usize, n: usize, key: &RngKey) -> Result<UnbiasednessReport> {
    Ok(rloo_unbiasedness(&chain_params(), batches, n, key.split(6))?)
}
