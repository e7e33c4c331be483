use super::*;
use crate::diffcore::{Shape, Tape};
use crate::neural::{ParamStore, Tensor};
use crate::stochastics::RngKey;
use crate::symbolic::{Value, DEFAULT_JOINT_CAP};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dsig(x: f64) -> f64 {
    sig(x) * (1.0 - sig(x))
}

fn chain_store(b0: f64, b1: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(
        "b",
        Tensor {
            rows: 2,
            cols: 1,
            data: vec![b0, b1],
        },
    );
    s
}

fn score_grads(f: &[f64], surrogate: for<'t> fn(&EstimatorBatch<'t>) -> Result<crate::diffcore::Var<'t>>) -> Vec<f64> {
    let tape = Tape::new();
    let s = tape.param("s", &vec![0.1; f.len()], Shape::Vector(f.len())).unwrap();
    let scores = (0..f.len()).map(|i| s.pick(i).exp()).collect();
    let batch = EstimatorBatch::new(f.to_vec(), scores);
    let l = surrogate(&batch).unwrap();
    let g = tape.backward(l).unwrap().wrt(s);
    // d exp(s)/ds = exp(0.1) for every score
    g.iter().map(|x| x / 0.1f64.exp()).collect()
}

#[test]
fn two_sample_coefficients_match_leave_one_out_form() {
    let f = [1.0, 0.0];
    let a = rloo_coefficients(&f).unwrap();
    let b = loo_coefficients(&f).unwrap();
    assert_eq!(a, vec![0.5, -0.5]);
    assert_eq!(b, vec![0.5, -0.5]);
    let g = score_grads(&f, rloo_surrogate);
    assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] + 0.5).abs() < 1e-15, "{g:?}");
}

#[test]
fn coefficient_forms_agree() {
    let key = RngKey::new(11);
    for trial in 0..50u64 {
        let k = key.split(trial);
        let n = 2 + (k.bits(0) % 7) as usize;
        let f: Vec<f64> = (0..n).map(|i| 10.0 * k.uniform(i as u64 + 1) - 5.0).collect();
        let a = rloo_coefficients(&f).unwrap();
        let b = loo_coefficients(&f).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14, "{a:?} {b:?}");
        }
    }
}

#[test]
fn constant_f_gives_zero_score_gradient() {
    let g = score_grads(&[3.5, 3.5, 3.5, 3.5], rloo_surrogate);
    assert!(g.iter().all(|&x| x == 0.0), "{g:?}");
    let g = score_grads(&[3.5, 3.5, 3.5, 3.5], reinforce_surrogate);
    assert!(g.iter().all(|&x| (x - 3.5 / 4.0).abs() < 1e-15));
}

#[test]
fn pathwise_term_is_averaged() {
    let tape = Tape::new();
    let p = tape.param("p", &[1.0, 2.0, 3.0], Shape::Vector(3)).unwrap();
    let f_vars: Vec<_> = (0..3).map(|i| p.pick(i) * p.pick(i)).collect();
    let scores = vec![tape.scalar(0.0); 3];
    let batch = EstimatorBatch::new(vec![1.0, 4.0, 9.0], scores).with_f_vars(f_vars);
    let g = tape.backward(rloo_surrogate(&batch).unwrap()).unwrap().wrt(p);
    for (i, gi) in g.iter().enumerate() {
        assert!((gi - 2.0 * (i + 1) as f64 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn single_sample_rejected() {
    let tape = Tape::new();
    let batch = EstimatorBatch::new(vec![1.0], vec![tape.scalar(0.0)]);
    assert!(matches!(rloo_surrogate(&batch), Err(GradientError::Contract(_))));
    let batch = EstimatorBatch::new(vec![1.0, f64::NAN], vec![tape.scalar(0.0); 2]);
    assert!(matches!(rloo_surrogate(&batch), Err(GradientError::Contract(_))));
}

fn chain_closed_form(b0: f64, b1: f64) -> [f64; 2] {
    // E[1 + x1 + 2 x2] with p(x1) = sig(b0), p(x2 | x1) = sig(b_{x1})
    let (s0, s1, d0, d1) = (sig(b0), sig(b1), dsig(b0), dsig(b1));
    [d0 + 2.0 * (-d0 * s0 + (1.0 - s0) * d0 + d0 * s1), 2.0 * s0 * d1]
}

#[test]
fn enumeration_matches_closed_form() {
    let (b0, b1) = (0.4, -1.1);
    let store = chain_store(b0, b1);
    let (model, init) = two_step_chain();
    let f = |t: &[Vec<Value>]| (1 + t[1][0] + 2 * t[2][0]) as f64;
    let ex = exact_expectation_gradient(&model, &init, &[], &[None, None], &store, f, DEFAULT_JOINT_CAP).unwrap();
    let cf = chain_closed_form(b0, b1);
    assert_eq!(ex.trajectories, 4);
    let (s0, s1) = (sig(b0), sig(b1));
    let value = 1.0 + s0 + 2.0 * ((1.0 - s0) * s0 + s0 * s1);
    assert!((ex.value - value).abs() < 1e-12);
    for (g, c) in ex.gradient["b"].iter().zip(cf) {
        assert!((g - c).abs() < 1e-12, "{g} vs {c}");
    }
}

#[test]
fn rloo_is_unbiased_and_beats_reinforce() {
    let store = chain_store(0.4, -1.1);
    let r = rloo_unbiasedness(&store, 10_000, 4, RngKey::new(2024)).unwrap();
    let cf = chain_closed_form(0.4, -1.1);
    for (e, c) in r.exact.iter().zip(cf) {
        assert!((e - c).abs() < 1e-12);
    }
    assert!(r.max_z() < 3.0, "{r:?}");
    assert_eq!(r.variance_reduced(), Some(true), "{r:?}");
}

#[test]
fn recursive_without_steps_is_rloo() {
    let tape = Tape::new();
    let s = tape.param("s", &[0.3, -0.2, 0.9], Shape::Vector(3)).unwrap();
    let base: Vec<_> = (0..3).map(|i| s.pick(i)).collect();
    let f = vec![2.0, -1.0, 0.5];
    let a = tape.backward(recursive_rloo(f.clone(), None, &base, &[]).unwrap()).unwrap().wrt(s);
    let b = tape
        .backward(rloo_surrogate(&EstimatorBatch::new(f, base.clone())).unwrap())
        .unwrap()
        .wrt(s);
    assert_eq!(a, b);
}

#[test]
fn recursive_two_particle_hand_expansion() {
    // P = [[0.6, 0.2], [0.3, 0.5]], f = (1, 0): pbar = (0.4, 0.4).
    let tape = Tape::new();
    let s = tape.param("s", &[0.0, 0.0], Shape::Vector(2)).unwrap();
    let p = tape.param("p", &[0.6, 0.2, 0.3, 0.5], Shape::Vector(4)).unwrap();
    let step = MarginalStep {
        probs: vec![vec![p.pick(0), p.pick(1)], vec![p.pick(2), p.pick(3)]],
    };
    let base = vec![s.pick(0), s.pick(1)];
    let l = recursive_rloo(vec![1.0, 0.0], None, &base, &[step]).unwrap();
    let g = tape.backward(l).unwrap();
    let gs = g.wrt(s);
    let gp = g.wrt(p);
    // 0.5 * grad S^0 - 0.5 * grad S^1 with
    // grad S^i = [(grad P_i0 + grad P_i1) / 2 + sum_j (P_ij - pbar_i) grad s_j] / pbar_i
    let expect_p = [0.625, 0.625, -0.625, -0.625];
    let expect_s = [0.5 * 0.5 - 0.5 * (-0.25), 0.5 * (-0.5) - 0.5 * 0.25];
    for (a, b) in gp.iter().zip(expect_p) {
        assert!((a - b).abs() < 1e-14, "{gp:?}");
    }
    for (a, b) in gs.iter().zip(expect_s) {
        assert!((a - b).abs() < 1e-14, "{gs:?}");
    }
}

#[test]
fn recursive_matrix_rows_are_transition_probabilities() {
    let store = chain_store(0.4, -1.1);
    let (model, _) = two_step_chain();
    let tape = Tape::new();
    let ctx = crate::neural::TapeContext::new(&tape, &store);
    let st = |v: Value, t| crate::symbolic::SymbolicState::new(vec![v], t);
    let prev = vec![st(0, 1), st(1, 1)];
    let next = vec![st(1, 2), st(0, 2)];
    let m = marginal_step(&model, &prev, &next, &[], None, &ctx, &tape).unwrap();
    let (s0, s1) = (sig(0.4), sig(-1.1));
    let want = [[s0, s1], [1.0 - s0, 1.0 - s1]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((m.probs[i][j].value() - want[i][j]).abs() < 1e-14);
        }
    }
}

#[test]
fn recursive_marginal_estimator_is_consistent() {
    // The ratio of Monte Carlo estimates makes the estimator biased at finite
    // N; the bias must shrink as N grows.
    let (b0, b1) = (0.4, -1.1);
    let store = chain_store(b0, b1);
    let (s0, s1, d0, d1) = (sig(b0), sig(b1), dsig(b0), dsig(b1));
    // E[1 + 3 x2] = 1 + 3 [(1 - s0) s0 + s0 s1]
    let cf = [3.0 * (d0 * (1.0 - s0) - s0 * d0 + d0 * s1), 3.0 * s0 * d1];
    let small = recursive_unbiasedness(&store, 20_000, 2, RngKey::new(77)).unwrap();
    let large = recursive_unbiasedness(&store, 20_000, 16, RngKey::new(78)).unwrap();
    for (e, c) in small.exact.iter().zip(cf) {
        assert!((e - c).abs() < 1e-12);
    }
    let bias = |r: &UnbiasednessReport| (r.estimator.mean[1] - r.exact[1]).abs();
    assert!(bias(&large) < bias(&small), "{small:?} {large:?}");
    assert!(bias(&large) < 0.006, "{large:?}");
    assert!(large.estimator.max_z(&large.exact).is_finite());
}

#[test]
fn log_derivative_two_state_one_step() {
    let (m, init, store) = categorical_chain(2, vec![vec![0.1, 0.9], vec![0.8, 0.2]], RngKey::new(5));
    let r = log_derivative_check(&m, &init, &[], &[Some(1)], &store, 1, DEFAULT_JOINT_CAP).unwrap();
    assert_eq!(r.targets, 2);
    assert_eq!(r.coordinates, 4);
    assert!(r.max_abs_gradient > 1e-3);
    assert!(r.max_abs_term2 > 1e-3, "observation makes the weights depend on the parameters");
    assert!(r.max_abs_deviation < 1e-9, "{r:?}");
}

#[test]
fn log_derivative_three_state_two_steps() {
    let em = vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.5, 0.5]];
    let (m, init, store) = categorical_chain(3, em, RngKey::new(6));
    for zs in [[Some(1), Some(0)], [None, Some(1)], [Some(0), None]] {
        let r = log_derivative_check(&m, &init, &[], &zs, &store, 2, DEFAULT_JOINT_CAP).unwrap();
        assert_eq!(r.targets, 3);
        assert!(r.max_abs_term2 > 1e-4);
        assert!(r.max_abs_deviation < 1e-9, "{zs:?}: {r:?}");
    }
}

#[test]
fn parameter_free_predecessor_leaves_only_first_term() {
    let (m, init, store) = categorical_chain(3, vec![vec![0.5, 0.5]; 3], RngKey::new(7));
    let r = log_derivative_check(&m, &init, &[], &[None], &store, 1, DEFAULT_JOINT_CAP).unwrap();
    assert_eq!(r.max_abs_term2, 0.0);
    assert!((r.max_abs_term1 - r.max_abs_gradient).abs() < 1e-12);
    assert!(r.max_abs_deviation < 1e-12);
}

#[test]
fn log_derivative_rejects_bad_step() {
    let (m, init, store) = categorical_chain(2, vec![vec![0.5, 0.5]; 2], RngKey::new(8));
    assert!(log_derivative_check(&m, &init, &[], &[None], &store, 2, DEFAULT_JOINT_CAP).is_err());
    assert!(log_derivative_check(&m, &init, &[], &[None], &store, 0, DEFAULT_JOINT_CAP).is_err());
}
