use std::sync::Arc;

use smallvec::smallvec;

use super::*;
use crate::diffcore::{grad_check, Tape};
use crate::neural::{FrozenContext, ParamStore, TapeContext, Tensor};
use crate::stochastics::RngKey;

struct ClampObs(VarId);

impl ObservationModel for ClampObs {
    fn factors(&self, z: Option<Value>) -> Vec<Factor> {
        match z {
            Some(v) => vec![Factor::Clamp { var: self.0, value: v }],
            None => Vec::new(),
        }
    }
}

fn coin_model(p: f64) -> (Model, VarId) {
    let mut b = Schema::builder();
    b.var("c", [0, 1]).cluster("coin", &["c"]);
    let s = Arc::new(b.build().unwrap());
    let c = s.id("c").unwrap();
    let prog = ClusterProgram::new().choice("flip", Some(c), vec![], ConstDist::new(&[1, 0], &[p, 1.0 - p]));
    (Model::new(s, vec![prog], Arc::new(ClampObs(c))).unwrap(), c)
}

fn empty_store() -> ParamStore {
    ParamStore::new()
}

#[test]
fn single_consistent_branch() {
    let (m, _) = coin_model(0.75);
    let store = empty_store();
    let ctx = FrozenContext::new(&store);
    let t = m.exact_conditional(0, &[0], &[], Some(1), &ctx).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!(t.entry(0), &[1]);
    assert!((t.probs[0] - 1.0).abs() < 1e-15);
    assert!((t.log_z - 0.75f64.ln()).abs() < 1e-15);
}

#[test]
fn uninformative_observation_keeps_prior() {
    let (m, _) = coin_model(0.3);
    let store = empty_store();
    let ctx = FrozenContext::new(&store);
    let t = m.exact_conditional(0, &[0], &[], None, &ctx).unwrap();
    assert_eq!(t.len(), 2);
    assert!((t.probs[0] - 0.3).abs() < 1e-15);
    assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(t.log_z.abs() < 1e-15);
}

#[test]
fn impossible_evidence_is_an_error() {
    let mut b = Schema::builder();
    b.var("c", [0, 1]).cluster("coin", &["c"]);
    let s = Arc::new(b.build().unwrap());
    let c = s.id("c").unwrap();
    let prog = ClusterProgram::new().choice("flip", Some(c), vec![], ConstDist::new(&[0], &[1.0]));
    let m = Model::new(s, vec![prog], Arc::new(ClampObs(c))).unwrap();
    let store = empty_store();
    let ctx = FrozenContext::new(&store);
    let err = m.exact_conditional(0, &[0], &[], Some(1), &ctx).unwrap_err();
    assert!(matches!(err, SymbolicError::ImpossibleEvidence { z: Some(1), .. }));
}

#[test]
fn infinite_domain_rejected() {
    let mut b = Schema::builder();
    b.infinite_var("x").cluster("c", &["x"]);
    let s = Arc::new(b.build().unwrap());
    let err = Model::new(s, vec![ClusterProgram::new()], Arc::new(NoObservation)).unwrap_err();
    assert!(matches!(err, SymbolicError::UnsupportedDomain(_)));
}

#[test]
fn structural_contracts_enforced() {
    let mut b = Schema::builder();
    b.var("a", [0, 1]).var("b", [0, 1]).cluster("ca", &["a"]).cluster("cb", &["b"]);
    let s = Arc::new(b.build().unwrap());
    let (a, bv) = (s.id("a").unwrap(), s.id("b").unwrap());
    let coin = || ConstDist::new(&[0, 1], &[0.5, 0.5]);
    // reads the current value of a later cluster
    let bad = vec![
        ClusterProgram::new().choice("a", Some(a), vec![Access::Current(bv)], coin()),
        ClusterProgram::new().choice("b", Some(bv), vec![], coin()),
    ];
    assert!(matches!(Model::new(s.clone(), bad, Arc::new(NoObservation)), Err(SymbolicError::Schema(_))));
    // b never written
    let bad = vec![ClusterProgram::new().choice("a", Some(a), vec![], coin()), ClusterProgram::new()];
    assert!(matches!(Model::new(s.clone(), bad, Arc::new(NoObservation)), Err(SymbolicError::Schema(_))));
    // choice read before it is made
    let bad = vec![
        ClusterProgram::new().choice("a", Some(a), vec![Access::Choice(0)], coin()),
        ClusterProgram::new().choice("b", Some(bv), vec![], coin()),
    ];
    assert!(matches!(Model::new(s.clone(), bad, Arc::new(NoObservation)), Err(SymbolicError::Schema(_))));
    // undeclared read at evaluation time
    let sneaky = FnRule(move |sc: &Scope<'_>| Ok(smallvec![sc.prev(a)?]));
    let progs = vec![
        ClusterProgram::new().choice("a", Some(a), vec![], ConstDist::new(&[1], &[1.0])),
        ClusterProgram::new().rule("b", vec![], vec![bv], sneaky),
    ];
    let m = Model::new(s, progs, Arc::new(NoObservation)).unwrap();
    let store = empty_store();
    let ctx = FrozenContext::new(&store);
    assert!(matches!(
        m.exact_conditional(1, &[0, 0], &[], None, &ctx),
        Err(SymbolicError::UndeclaredAccess { .. })
    ));
}

#[test]
fn rule_outputs_checked_against_domain() {
    let mut b = Schema::builder();
    b.var("a", [0, 1]).cluster("ca", &["a"]);
    let s = Arc::new(b.build().unwrap());
    let a = s.id("a").unwrap();
    let prog = ClusterProgram::new().rule("r", vec![], vec![a], FnRule(|_: &Scope<'_>| Ok(smallvec![7])));
    let m = Model::new(s, vec![prog], Arc::new(NoObservation)).unwrap();
    let store = empty_store();
    let ctx = FrozenContext::new(&store);
    assert!(matches!(
        m.exact_conditional(0, &[0], &[], None, &ctx),
        Err(SymbolicError::OutOfDomain { value: 7, .. })
    ));
}

/// Two coins with an observation of their OR.
struct OrObs {
    a: VarId,
    b: VarId,
    naive: bool,
}

impl ObservationModel for OrObs {
    fn factors(&self, z: Option<Value>) -> Vec<Factor> {
        match z {
            None => Vec::new(),
            Some(0) => vec![
                Factor::Clamp { var: self.a, value: 0 },
                Factor::Clamp { var: self.b, value: 0 },
            ],
            Some(_) if self.naive => vec![
                Factor::Clamp { var: self.a, value: 1 },
                Factor::Clamp { var: self.b, value: 1 },
            ],
            Some(_) => vec![Factor::Table {
                name: "or".into(),
                reads: vec![self.a, self.b],
                weight: Arc::new(|v: &[Value]| f64::from(u8::from(v[0] == 1 || v[1] == 1))),
            }],
        }
    }

    fn likelihood(&self, s: &[Value], z: Option<Value>) -> f64 {
        let or = s[self.a.0] == 1 || s[self.b.0] == 1;
        match z {
            None => 1.0,
            Some(v) => f64::from(u8::from(or == (v == 1))),
        }
    }
}

/// Coins a, b and a counter n = prev n + a + b (capped).
fn or_model(naive: bool) -> Model {
    let mut b = Schema::builder();
    b.var("a", [0, 1])
        .var("b", [0, 1])
        .var("n", 0..=3)
        .cluster("ca", &["a"])
        .cluster("cb", &["b"])
        .cluster("cn", &["n"]);
    let s = Arc::new(b.build().unwrap());
    let (a, bv, n) = (s.id("a").unwrap(), s.id("b").unwrap(), s.id("n").unwrap());
    let progs = vec![
        ClusterProgram::new().choice(
            "a",
            Some(a),
            vec![Access::Prev(a)],
            ConstDist::table(&[1, 0], Access::Prev(a), vec![vec![0.2, 0.8], vec![0.6, 0.4]]),
        ),
        ClusterProgram::new().choice("b", Some(bv), vec![], ConstDist::new(&[1, 0], &[0.3, 0.7])),
        ClusterProgram::new()
            .choice("bonus", None, vec![Access::Current(a)], ConstDist::table(&[0, 1], Access::Current(a), vec![vec![1.0, 0.0], vec![0.5, 0.5]]))
            .rule(
                "count",
                vec![Access::Prev(n), Access::Current(a), Access::Current(bv), Access::Choice(0)],
                vec![n],
                FnRule(move |sc: &Scope<'_>| {
                    let total = sc.prev(n)? + sc.current(a)? + sc.current(bv)? + sc.choice(0)?;
                    Ok(smallvec![total.min(3)])
                }),
            ),
    ];
    Model::new(s, progs, Arc::new(OrObs { a, b: bv, naive })).unwrap()
}

#[test]
fn shared_observation_merges_clusters() {
    let m = or_model(false);
    let plan = m.plan(Some(1)).unwrap();
    assert_eq!(plan.groups.len(), 2);
    assert_eq!(plan.groups[0].clusters, vec![0, 1]);
    assert_eq!(plan.groups[1].clusters, vec![2]);
    let plan0 = m.plan(Some(0)).unwrap();
    assert_eq!(plan0.groups.len(), 3);
}

#[test]
fn factorised_joint_matches_direct() {
    let store = empty_store();
    let ctx = FrozenContext::new(&store);
    for naive in [false, true] {
        let m = or_model(naive);
        let r = validate_clusters(
            &m,
            50,
            RngKey::new(4),
            |k| ValidationInstance {
                prev: vec![(k.bits(0) % 2) as Value, (k.bits(1) % 2) as Value, (k.bits(2) % 4) as Value],
                exo: vec![],
                z: match k.bits(3) % 3 {
                    0 => None,
                    1 => Some(0),
                    _ => Some(1),
                },
            },
            &ctx,
        )
        .unwrap();
        if naive {
            assert!(r.max_tv > 0.01, "{r:?}");
            assert!(!r.passed());
            assert!(r.worst.is_some());
        } else {
            assert!(r.passed(), "{r:?}");
        }
    }
}

#[test]
fn independent_clusters_give_product_measure() {
    let m = or_model(false);
    let store = empty_store();
    let ctx = FrozenContext::new(&store);
    let j = enumerate_joint(&m, &[1, 0, 0], &[], None, &ctx, JointMode::Factorised, DEFAULT_JOINT_CAP).unwrap();
    let ab = j.marginal(&[VarId(0), VarId(1)]);
    assert_eq!(ab.len(), 4);
    for (k, p) in ab {
        let pa = if k[0] == 1 { 0.6 } else { 0.4 };
        let pb = if k[1] == 1 { 0.3 } else { 0.7 };
        assert!((p - pa * pb).abs() < 1e-12);
    }
    assert!((j.entries.values().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(matches!(
        enumerate_joint(&m, &[1, 0, 0], &[], None, &ctx, JointMode::Factorised, 2),
        Err(SymbolicError::CapExceeded(2))
    ));
}

#[test]
fn single_cluster_joint_equals_conditional() {
    let (m, _) = coin_model(0.4);
    let store = empty_store();
    let ctx = FrozenContext::new(&store);
    let t = m.exact_conditional(0, &[0], &[], None, &ctx).unwrap();
    let j = enumerate_joint(&m, &[0], &[], None, &ctx, JointMode::Direct, DEFAULT_JOINT_CAP).unwrap();
    for k in 0..t.len() {
        assert!((j.entries[&t.entry(k).to_vec()] - t.probs[k]).abs() < 1e-15);
    }
}

fn param_coin() -> Model {
    let mut b = Schema::builder();
    b.var("c", [0, 1]).var("d", [0, 1, 2]).cluster("coin", &["c"]).cluster("die", &["d"]);
    let s = Arc::new(b.build().unwrap());
    let (c, d) = (s.id("c").unwrap(), s.id("d").unwrap());
    let progs = vec![
        ClusterProgram::new().choice("flip", Some(c), vec![], ParamBernoulli { param: "p".into(), row_by: None }),
        ClusterProgram::new().choice(
            "roll",
            Some(d),
            vec![Access::Current(c)],
            ParamCategorical { param: "q".into(), labels: vec![0, 1, 2], row_by: Some(Access::Current(c)) },
        ),
    ];
    struct Obs(VarId, VarId);
    impl ObservationModel for Obs {
        fn factors(&self, z: Option<Value>) -> Vec<Factor> {
            let (c, d) = (self.0, self.1);
            match z {
                None => vec![],
                Some(_) => vec![Factor::Table {
                    name: "soft".into(),
                    reads: vec![c, d],
                    weight: Arc::new(|v: &[Value]| 0.1 + 0.3 * v[0] as f64 + 0.2 * v[1] as f64),
                }],
            }
        }
    }
    Model::new(s, progs, Arc::new(Obs(c, d))).unwrap()
}

#[test]
fn log_evidence_gradient_matches_finite_differences() {
    let m = param_coin();
    let err = grad_check(
        |tape, x| {
            let mut store = ParamStore::new();
            store.insert("p", Tensor::scalar(0.0));
            store.insert("q", Tensor::zeros(6, 1));
            let ctx = TapeContext::new(tape, &store);
            // route the probe vector in as the parameters
            let p = x.pick(0);
            let q = x.gather(&[1, 2, 3, 4, 5, 6]);
            let _ = ctx;
            let ctx = Fixed { p, q };
            let t = m.exact_conditional(0, &[0, 0], &[], Some(1), &ctx).unwrap();
            t.log_evidence_var().unwrap()
        },
        &[0.3, 0.1, -0.2, 0.5, 1.0, -1.0, 0.0],
        1e-6,
    );
    assert!(err < 1e-6, "{err}");
}

/// Context returning fixed vars as parameters.
struct Fixed<'t> {
    p: crate::diffcore::Var<'t>,
    q: crate::diffcore::Var<'t>,
}

impl<'t> crate::neural::NeuralContext<'t> for Fixed<'t> {
    fn tape(&self) -> Option<&'t Tape> {
        Some(self.p.tape())
    }
    fn parameter(&self, name: &str) -> crate::neural::Result<crate::neural::Output<'t>> {
        Ok(crate::neural::Output::Var(if name == "p" { self.p } else { self.q }))
    }
    fn network(&self, name: &str, _: &[f64]) -> crate::neural::Result<crate::neural::Output<'t>> {
        Err(crate::neural::NeuralError::Unknown(name.into()))
    }
}

#[test]
fn differentiable_and_frozen_tables_agree() {
    let m = param_coin();
    let mut store = ParamStore::new();
    store.insert("p", Tensor::scalar(0.7));
    store.insert("q", Tensor { rows: 6, cols: 1, data: vec![0.1, -0.3, 0.2, 0.9, 0.0, -1.1] });
    let tape = Tape::new();
    let live = TapeContext::new(&tape, &store);
    let frozen = FrozenContext::new(&store);
    let a = m.exact_conditional(0, &[0, 0], &[], Some(1), &live).unwrap();
    let b = m.exact_conditional(0, &[0, 0], &[], Some(1), &frozen).unwrap();
    assert_eq!(a.len(), b.len());
    for j in 0..a.len() {
        assert!((a.probs[j] - b.probs[j]).abs() < 1e-14);
        assert!((a.posterior_var(j).unwrap().value() - a.probs[j]).abs() < 1e-14);
        assert!(b.posterior_var(j).is_none());
    }
    assert!((a.log_evidence_var().unwrap().value() - b.log_z).abs() < 1e-14);
}
