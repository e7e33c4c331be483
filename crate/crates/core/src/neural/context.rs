use std::cell::RefCell;
use std::sync::Arc;

use rustc_hash::FxHashMap;
use smallvec::SmallVec;

use super::{BoundMlp, NeuralError, ParamStore, Result};
use crate::diffcore::{Shape, Tape, Var};

type InputKey = SmallVec<[u64; 8]>;

fn input_key(input: &[f64]) -> InputKey {
    input.iter().map(|x| x.to_bits()).collect()
}

/// Result of a neural call: either a recorded Var or detached values.
#[derive(Debug, Clone)]
pub enum Output<'t> {
    Const(Arc<[f64]>),
    Var(Var<'t>),
}

impl<'t> Output<'t> {
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        match self {
            Output::Const(v) => f(v),
            Output::Var(v) => v.with_values(f),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.with_values(<[f64]>::to_vec)
    }

    pub fn value(&self) -> f64 {
        self.with_values(|v| v[0])
    }

    pub fn var(&self) -> Option<Var<'t>> {
        match self {
            Output::Const(_) => None,
            Output::Var(v) => Some(*v),
        }
    }
}

/// Access to learnable quantities during one evaluation of a model.
pub trait NeuralContext<'t> {
    /// Tape that differentiable outputs live on, if any.
    fn tape(&self) -> Option<&'t Tape>;
    /// A named scalar or vector parameter.
    fn parameter(&self, name: &str) -> Result<Output<'t>>;
    /// Output of the named network on `input`.
    fn network(&self, name: &str, input: &[f64]) -> Result<Output<'t>>;
}

/// Differentiable context: parameters become tape leaves on first use and
/// network outputs are memoised by exact input bits.
pub struct TapeContext<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    params: RefCell<FxHashMap<String, Var<'t>>>,
    nets: RefCell<FxHashMap<String, BoundMlp<'t>>>,
    memo: RefCell<FxHashMap<String, FxHashMap<InputKey, Var<'t>>>>,
}

impl<'t, 's> TapeContext<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            params: RefCell::default(),
            nets: RefCell::default(),
            memo: RefCell::default(),
        }
    }

    /// Number of distinct network evaluations recorded so far.
    pub fn network_calls(&self) -> usize {
        self.memo.borrow().values().map(FxHashMap::len).sum()
    }
}

impl<'t> NeuralContext<'t> for TapeContext<'t, '_> {
    fn tape(&self) -> Option<&'t Tape> {
        Some(self.tape)
    }

    fn parameter(&self, name: &str) -> Result<Output<'t>> {
        if let Some(v) = self.params.borrow().get(name) {
            return Ok(Output::Var(*v));
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| NeuralError::Unknown(name.to_string()))?;
        let shape = if t.len() == 1 {
            Shape::Scalar
        } else {
            Shape::Vector(t.len())
        };
        let v = self.tape.param(name, &t.data, shape)?;
        self.params.borrow_mut().insert(name.to_string(), v);
        Ok(Output::Var(v))
    }

    fn network(&self, name: &str, input: &[f64]) -> Result<Output<'t>> {
        let key = input_key(input);
        if let Some(v) = self.memo.borrow().get(name).and_then(|m| m.get(&key)) {
            return Ok(Output::Var(*v));
        }
        if !self.nets.borrow().contains_key(name) {
            let bound = BoundMlp::bind(self.tape, self.store, name)?;
            self.nets.borrow_mut().insert(name.to_string(), bound);
        }
        let out = {
            let nets = self.nets.borrow();
            let x = self.tape.vector(input);
            nets[name].forward(x)?
        };
        self.memo
            .borrow_mut()
            .entry(name.to_string())
            .or_default()
            .insert(key, out);
        Ok(Output::Var(out))
    }
}

/// Detached context over a parameter snapshot; nothing is recorded.
pub struct FrozenContext<'s> {
    store: &'s ParamStore,
    memo: RefCell<FxHashMap<String, FxHashMap<InputKey, Arc<[f64]>>>>,
}

impl<'s> FrozenContext<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            memo: RefCell::default(),
        }
    }
}

impl<'t> NeuralContext<'t> for FrozenContext<'_> {
    fn tape(&self) -> Option<&'t Tape> {
        None
    }

    fn parameter(&self, name: &str) -> Result<Output<'t>> {
        let t = self
            .store
            .get(name)
            .ok_or_else(|| NeuralError::Unknown(name.to_string()))?;
        Ok(Output::Const(t.data.clone().into()))
    }

    fn network(&self, name: &str, input: &[f64]) -> Result<Output<'t>> {
        let key = input_key(input);
        if let Some(v) = self.memo.borrow().get(name).and_then(|m| m.get(&key)) {
            return Ok(Output::Const(v.clone()));
        }
        let spec = self
            .store
            .network(name)
            .ok_or_else(|| NeuralError::Unknown(name.to_string()))?;
        let out: Arc<[f64]> = spec.forward_values(self.store, name, input)?.into();
        self.memo
            .borrow_mut()
            .entry(name.to_string())
            .or_default()
            .insert(key, out.clone());
        Ok(Output::Const(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{MlpSpec, Tensor};
    use crate::stochastics::RngKey;

    #[test]
    fn tape_and_frozen_contexts_agree() {
        let mut s = ParamStore::init(&MlpSpec::policy(6, 8), "policy", RngKey::new(2)).unwrap();
        s.insert("hit_logit", Tensor::scalar(0.4));
        let t = Tape::new();
        let live = TapeContext::new(&t, &s);
        let frozen = FrozenContext::new(&s);
        let x = [0.1, 0.2, 0.3, 0.4, -0.1, -0.1];
        let a = live.network("policy", &x).unwrap();
        let b = NeuralContext::network(&frozen, "policy", &x).unwrap();
        assert_eq!(a.values(), b.values());
        let again = live.network("policy", &x).unwrap();
        assert_eq!(a.var().unwrap().id(), again.var().unwrap().id());
        assert_eq!(live.network_calls(), 1);
        assert_eq!(live.parameter("hit_logit").unwrap().value(), 0.4);
        assert!(NeuralContext::parameter(&frozen, "nope").is_err());
    }
}
