use super::{GradientError, Result};
use crate::diffcore::{Tape, Var};

/// Per-particle query values and accumulated log-scores.
///
/// `f_values` are detached copies used as score coefficients; `f_vars`, when
/// present, carry the pathwise dependence of the query on the parameters.
#[derive(Debug, Clone)]
pub struct EstimatorBatch<'t> {
    pub f_values: Vec<f64>,
    pub f_vars: Option<Vec<Var<'t>>>,
    pub scores: Vec<Var<'t>>,
}

impl<'t> EstimatorBatch<'t> {
    pub fn new(f_values: Vec<f64>, scores: Vec<Var<'t>>) -> Self {
        Self {
            f_values,
            f_vars: None,
            scores,
        }
    }

    pub fn with_f_vars(mut self, f_vars: Vec<Var<'t>>) -> Self {
        self.f_vars = Some(f_vars);
        self
    }

    pub fn len(&self) -> usize {
        self.f_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_values.is_empty()
    }

    fn check(&self) -> Result<&'t Tape> {
        let n = self.len();
        if n < 2 {
            return Err(GradientError::Contract(format!("need at least 2 samples, got {n}")));
        }
        if self.scores.len() != n {
            return Err(GradientError::Contract(format!(
                "{} scores for {n} values",
                self.scores.len()
            )));
        }
        if let Some(fv) = &self.f_vars {
            if fv.len() != n {
                return Err(GradientError::Contract(format!("{} f vars for {n} values", fv.len())));
            }
        }
        if let Some(i) = self.f_values.iter().position(|f| !f.is_finite()) {
            return Err(GradientError::Contract(format!("f value {i} is not finite")));
        }
        Ok(self.scores[0].tape())
    }
}

/// `(f_i - mean f) / (N - 1)`.
pub fn rloo_coefficients(f: &[f64]) -> Result<Vec<f64>> {
    let n = f.len();
    if n < 2 {
        return Err(GradientError::Contract(format!("need at least 2 samples, got {n}")));
    }
    let mean = f.iter().sum::<f64>() / n as f64;
    Ok(f.iter().map(|x| (x - mean) / (n - 1) as f64).collect())
}

/// `(f_i - mean_{j != i} f_j) / N`, the leave-one-out form of the same
/// coefficients.
pub fn loo_coefficients(f: &[f64]) -> Result<Vec<f64>> {
    let n = f.len();
    if n < 2 {
        return Err(GradientError::Contract(format!("need at least 2 samples, got {n}")));
    }
    let total: f64 = f.iter().sum();
    Ok(f.iter()
        .map(|x| (x - (total - x) / (n - 1) as f64) / n as f64)
        .collect())
}

fn surrogate<'t>(tape: &'t Tape, batch: &EstimatorBatch<'t>, coeffs: &[f64]) -> Var<'t> {
    let n = batch.len() as f64;
    let score = tape.concat(&batch.scores).dot(tape.vector(coeffs));
    match &batch.f_vars {
        Some(fv) => score + tape.concat(fv).sum().scale(1.0 / n),
        None => score,
    }
}

/// `(1/N) sum f_vars_i + (1/(N-1)) sum (f_i - mean f) s_i`.
pub fn rloo_surrogate<'t>(batch: &EstimatorBatch<'t>) -> Result<Var<'t>> {
    let tape = batch.check()?;
    let c = rloo_coefficients(&batch.f_values)?;
    Ok(surrogate(tape, batch, &c))
}

/// Plain score-function surrogate without a baseline:
/// `(1/N) sum f_vars_i + (1/N) sum f_i s_i`.
pub fn reinforce_surrogate<'t>(batch: &EstimatorBatch<'t>) -> Result<Var<'t>> {
    let tape = batch.check()?;
    let n = batch.len() as f64;
    let c: Vec<f64> = batch.f_values.iter().map(|f| f / n).collect();
    Ok(surrogate(tape, batch, &c))
}
