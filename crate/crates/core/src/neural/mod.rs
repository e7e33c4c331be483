//! Small multilayer perceptrons, parameter storage, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod context;
mod mlp;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{load_binary, load_json, save_binary, save_json, CHECKPOINT_MAGIC};
pub use context::{FrozenContext, NeuralContext, Output, TapeContext};
pub use mlp::{BoundMlp, Head, MlpSpec};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::DiffError;
use crate::stochastics::RngKey;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch for {name}: {detail}")]
    Shape { name: String, detail: String },
    #[error("unknown parameter or network: {0}")]
    Unknown(String),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

/// Row-major dense parameter block. Vectors use `cols == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named parameters with Adam moments and registered network layouts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    networks: BTreeMap<String, MlpSpec>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Glorot-uniform weights, zero biases, zero moments.
    pub fn init(spec: &MlpSpec, name: &str, key: RngKey) -> Result<Self> {
        let mut s = Self::new();
        s.add_mlp(name, spec.clone(), key)?;
        Ok(s)
    }

    pub fn add_mlp(&mut self, name: &str, spec: MlpSpec, key: RngKey) -> Result<()> {
        spec.validate()?;
        for (k, (fan_in, fan_out)) in spec.layer_dims().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let lk = key.split(k as u64);
            let mut w = Tensor::zeros(fan_out, fan_in);
            for (i, x) in w.data.iter_mut().enumerate() {
                *x = (2.0 * lk.uniform(i as u64) - 1.0) * bound;
            }
            self.insert(&mlp::weight_name(name, k), w);
            self.insert(&mlp::bias_name(name, k), Tensor::zeros(fan_out, 1));
        }
        self.networks.insert(name.to_string(), spec);
        Ok(())
    }

    /// Inserts or replaces a parameter and resets its moments.
    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.first.insert(name.to_string(), vec![0.0; t.len()]);
        self.second.insert(name.to_string(), vec![0.0; t.len()]);
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.get(name)
            .and_then(|t| t.data.first().copied())
            .ok_or_else(|| NeuralError::Unknown(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn network(&self, name: &str) -> Option<&MlpSpec> {
        self.networks.get(name)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Same parameter values (moments and step counter ignored).
    pub fn same_params(&self, other: &ParamStore) -> bool {
        self.params == other.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_glorot_and_deterministic() {
        let spec = MlpSpec::policy(6, 8);
        let a = ParamStore::init(&spec, "policy", RngKey::new(5)).unwrap();
        let b = ParamStore::init(&spec, "policy", RngKey::new(5)).unwrap();
        assert_eq!(a, b);
        for (k, (fi, fo)) in spec.layer_dims().enumerate() {
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            let w = a.get(&format!("policy.layer{k}.weight")).unwrap();
            assert_eq!((w.rows, w.cols), (fo, fi));
            assert!(w.data.iter().all(|x| x.abs() <= bound));
            let bias = a.get(&format!("policy.layer{k}.bias")).unwrap();
            assert!(bias.data.iter().all(|&x| x == 0.0));
        }
    }
}
