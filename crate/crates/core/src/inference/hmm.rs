use std::sync::Arc;

use smallvec::SmallVec;

use super::{InferenceError, InitialDistribution, Result};
use crate::symbolic::{Access, ClusterProgram, ConstDist, Factor, Model, ObservationModel, Schema, Value, VarId};

/// Finite hidden Markov model given by its tables.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmSpec {
    pub init: Vec<f64>,
    /// `transition[i][j] = p(x' = j | x = i)`.
    pub transition: Vec<Vec<f64>>,
    /// `emission[i][z] = p(z | x = i)`.
    pub emission: Vec<Vec<f64>>,
}

/// Filtered distributions for `t = 0..=T` (index 0 is the prior) and the
/// total log-evidence of the observations.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmForward {
    pub filtered: Vec<Vec<f64>>,
    pub log_evidence: f64,
}

fn row_ok(r: &[f64]) -> bool {
    r.iter().all(|p| *p >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

impl HmmSpec {
    pub fn states(&self) -> usize {
        self.init.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.states();
        let ok = k > 0
            && row_ok(&self.init)
            && self.transition.len() == k
            && self.transition.iter().all(|r| r.len() == k && row_ok(r))
            && self.emission.len() == k
            && self.emission.iter().all(|r| !r.is_empty() && row_ok(r));
        if ok {
            Ok(())
        } else {
            Err(InferenceError::Contract("HMM tables must be stochastic".into()))
        }
    }

    /// The same chain as a one-cluster symbolic model over variable `x`.
    pub fn to_model(&self) -> Result<(Model, InitialDistribution)> {
        self.validate()?;
        let k = self.states() as Value;
        let mut b = Schema::builder();
        b.var("x", 0..k).cluster("x", &["x"]);
        let schema = Arc::new(b.build()?);
        let x = schema.id("x").expect("declared");
        let labels: Vec<Value> = (0..k).collect();
        let prog = ClusterProgram::new().choice(
            "step",
            Some(x),
            vec![Access::Prev(x)],
            ConstDist::table(&labels, Access::Prev(x), self.transition.clone()),
        );
        let obs = Arc::new(HmmObservation {
            x,
            emission: self.emission.clone(),
        });
        let model = Model::new(schema, vec![prog], obs)?;
        let init = InitialDistribution::new().block(
            vec![x],
            labels.iter().map(|&l| (vec![l], self.init[l as usize])).collect(),
        );
        Ok((model, init))
    }
}

struct HmmObservation {
    x: VarId,
    emission: Vec<Vec<f64>>,
}

impl ObservationModel for HmmObservation {
    fn factors(&self, z: Option<Value>) -> Vec<Factor> {
        let Some(z) = z else { return Vec::new() };
        let col: SmallVec<[f64; 8]> = self
            .emission
            .iter()
            .map(|r| r.get(z as usize).copied().unwrap_or(0.0))
            .collect();
        vec![Factor::Table {
            name: "emission".into(),
            reads: vec![self.x],
            weight: Arc::new(move |v: &[Value]| col[v[0] as usize]),
        }]
    }
}

/// Forward algorithm; observation `zs[t-1]` is emitted at time `t >= 1`.
pub fn exact_forward_hmm(spec: &HmmSpec, zs: &[Option<usize>]) -> Result<HmmForward> {
    spec.validate()?;
    let k = spec.states();
    let mut belief = spec.init.clone();
    let mut filtered = vec![belief.clone()];
    let mut log_ev = Vec::new();
    for z in zs {
        let mut pred = vec![0.0; k];
        for (i, b) in belief.iter().enumerate() {
            for (j, p) in pred.iter_mut().enumerate() {
                *p += b * spec.transition[i][j];
            }
        }
        if let Some(z) = z {
            for (j, p) in pred.iter_mut().enumerate() {
                *p *= spec.emission[j].get(*z).copied().unwrap_or(0.0);
            }
        }
        let total: f64 = pred.iter().sum();
        if total <= 0.0 {
            return Err(InferenceError::Degenerate);
        }
        log_ev.push(total.ln());
        belief = pred.iter().map(|p| p / total).collect();
        filtered.push(belief.clone());
    }
    Ok(HmmForward {
        filtered,
        log_evidence: log_ev.iter().sum(),
    })
}
