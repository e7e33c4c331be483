use std::fmt::Debug;

use super::{Result, RngKey, StochError};
use crate::diffcore::{Tape, Var};

/// Inverse-CDF draw over `probs` (declaration order) with uniform `u`.
///
/// Rounding slack at the top of the CDF falls to the last entry with
/// positive mass.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Categorical distribution over `labels` parametrised by unnormalised logits.
#[derive(Debug, Clone)]
pub struct CategoricalDist<'t, L> {
    logits: Var<'t>,
    labels: Vec<L>,
}

impl<'t, L: Clone + PartialEq + Debug> CategoricalDist<'t, L> {
    pub fn new(logits: Var<'t>, labels: Vec<L>) -> Result<Self> {
        if labels.is_empty() {
            return Err(StochError::Invalid("categorical needs K >= 1".into()));
        }
        if logits.shape().is_scalar() || logits.len() != labels.len() {
            return Err(StochError::Invalid(format!(
                "{} logits for {} labels",
                logits.len(),
                labels.len()
            )));
        }
        Ok(Self { logits, labels })
    }

    /// Uniform over `labels`, recorded as zero logits on `tape`.
    pub fn uniform(tape: &'t Tape, labels: Vec<L>) -> Result<Self> {
        let logits = tape.vector(&vec![0.0; labels.len()]);
        Self::new(logits, labels)
    }

    pub fn labels(&self) -> &[L] {
        &self.labels
    }

    /// Normalised log-probabilities as one vector Var.
    pub fn log_probs(&self) -> Var<'t> {
        self.logits.log_softmax()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.with_values(softmax)
    }

    pub fn sample(&self, key: &RngKey) -> (L, usize) {
        let i = sample_index(&self.probs(), key.uniform(0));
        (self.labels[i].clone(), i)
    }

    pub fn log_prob(&self, label: &L) -> Result<Var<'t>> {
        let i = self
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| StochError::Domain(format!("{label:?}")))?;
        Ok(self.log_probs().pick(i))
    }

    pub fn enumerate_support(&self) -> Vec<(L, Var<'t>)> {
        let lp = self.log_probs();
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), lp.pick(i).exp()))
            .collect()
    }
}

/// Bernoulli with `p = sigmoid(logit)`; support order is `[true, false]`.
#[derive(Debug, Clone, Copy)]
pub struct BernoulliDist<'t> {
    logit: Var<'t>,
}

impl<'t> BernoulliDist<'t> {
    pub fn new(logit: Var<'t>) -> Result<Self> {
        if !logit.shape().is_scalar() {
            return Err(StochError::Invalid("bernoulli logit must be scalar".into()));
        }
        Ok(Self { logit })
    }

    pub fn from_prob(tape: &'t Tape, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(StochError::Invalid(format!("p = {p} not in (0, 1)")));
        }
        Self::new(tape.scalar((p / (1.0 - p)).ln()))
    }

    pub fn prob(&self) -> f64 {
        sigmoid(self.logit.value())
    }

    /// `[log p, log (1 - p)]`.
    pub fn log_probs(&self) -> Var<'t> {
        let zero = self.logit.tape().scalar(0.0);
        self.logit.tape().concat(&[self.logit, zero]).log_softmax()
    }

    pub fn sample(&self, key: &RngKey) -> (bool, usize) {
        let p = self.prob();
        let i = sample_index(&[p, 1.0 - p], key.uniform(0));
        (i == 0, i)
    }

    pub fn log_prob(&self, label: bool) -> Var<'t> {
        self.log_probs().pick(if label { 0 } else { 1 })
    }

    pub fn enumerate_support(&self) -> Vec<(bool, Var<'t>)> {
        let lp = self.log_probs();
        vec![(true, lp.pick(0).exp()), (false, lp.pick(1).exp())]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;

    const LN_QUARTER: f64 = -1.3862943611198906;

    #[test]
    fn degenerate_categorical_always_hits() {
        let t = Tape::new();
        let d = CategoricalDist::new(t.vector(&[0.0, -800.0]), vec!['a', 'b']).unwrap();
        let root = RngKey::new(3);
        for i in 0..1000 {
            assert_eq!(d.sample(&root.split(i)).0, 'a');
        }
    }

    #[test]
    fn bernoulli_frequency() {
        let t = Tape::new();
        let d = BernoulliDist::from_prob(&t, 0.75).unwrap();
        let root = RngKey::new(11);
        let n = 100_000;
        let hits = (0..n).filter(|&i| d.sample(&root.split(i)).0).count();
        assert!((hits as f64 / n as f64 - 0.75).abs() < 0.005);
    }

    #[test]
    fn uniform_four_way_frequencies() {
        let t = Tape::new();
        let d = CategoricalDist::uniform(&t, vec![0, 1, 2, 3]).unwrap();
        let root = RngKey::new(12);
        let n = 100_000u64;
        let mut counts = [0usize; 4];
        for i in 0..n {
            counts[d.sample(&root.split(i)).1] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn log_probs_of_simple_cases() {
        let t = Tape::new();
        let d = CategoricalDist::uniform(&t, vec![1, 2, 3, 4]).unwrap();
        for l in 1..=4 {
            assert!((d.log_prob(&l).unwrap().value() - LN_QUARTER).abs() < 1e-15);
        }
        assert!(matches!(d.log_prob(&9), Err(StochError::Domain(_))));
        let b = BernoulliDist::new(t.scalar(0.0)).unwrap();
        assert!((b.log_prob(true).value() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn categorical_log_prob_gradient() {
        let logits = [0.3, -1.2, 0.8, 0.05];
        for i in 0..4 {
            let err = grad_check(
                move |_, x| {
                    CategoricalDist::new(x, vec![0, 1, 2, 3])
                        .unwrap()
                        .log_prob(&i)
                        .unwrap()
                },
                &logits,
                1e-6,
            );
            assert!(err < 1e-6, "{err}");
            // analytic form: delta_ij - softmax_j
            let t = Tape::new();
            let x = t.vector(&logits);
            let d = CategoricalDist::new(x, vec![0, 1, 2, 3]).unwrap();
            let g = t.backward(d.log_prob(&i).unwrap()).unwrap().wrt(x);
            let sm = softmax(&logits);
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 } - sm[j];
                assert!((g[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn supports_are_normalised_and_ordered() {
        let t = Tape::new();
        let b = BernoulliDist::from_prob(&t, 0.3).unwrap();
        let s = b.enumerate_support();
        assert!(s[0].0 && !s[1].0);
        assert!((s[0].1.value() - 0.3).abs() < 1e-12);
        let c = CategoricalDist::new(
            t.vector(&[0.1, 0.2, -0.3, 1.0, 0.0, 2.0, -1.0, 0.5]),
            (0..8).collect(),
        )
        .unwrap();
        let sc = c.enumerate_support();
        assert_eq!(sc.len(), 8);
        assert!(sc.iter().enumerate().all(|(i, (l, _))| *l == i as i32));
        let total: f64 = sc.iter().map(|(_, p)| p.value()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut joint = 0.0;
        for (_, pc) in &sc {
            for (_, pb) in &s {
                joint += pc.value() * pb.value();
            }
        }
        assert_eq!(sc.len() * s.len(), 16);
        assert!((joint - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_index_handles_rounding() {
        assert_eq!(sample_index(&[0.5, 0.5, 0.0], 0.999_999_999_999), 1);
        assert_eq!(sample_index(&[0.0, 1.0], 0.0), 1);
    }
}
