use serde::{Deserialize, Serialize};

use super::{NeuralError, ParamStore, Result};
use crate::diffcore::{logsumexp, Shape, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    LogSoftmax,
    Linear,
    /// Single output read as the logit of a Bernoulli.
    SigmoidLogit,
}

/// Layer sizes `[input, hidden.., output]` with relu hidden activations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub head: Head,
}

pub(crate) fn weight_name(net: &str, k: usize) -> String {
    format!("{net}.layer{k}.weight")
}

pub(crate) fn bias_name(net: &str, k: usize) -> String {
    format!("{net}.layer{k}.bias")
}

impl MlpSpec {
    /// Two relu layers of 64 and 32 units with a log-softmax head.
    pub fn policy(inputs: usize, actions: usize) -> Self {
        Self {
            sizes: vec![inputs, 64, 32, actions],
            head: Head::LogSoftmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 3 {
            return Err(NeuralError::Spec("need at least one hidden layer".into()));
        }
        if self.sizes.contains(&0) {
            return Err(NeuralError::Spec("layer sizes must be >= 1".into()));
        }
        if self.head == Head::SigmoidLogit && self.outputs() != 1 {
            return Err(NeuralError::Spec("sigmoid-logit head has one output".into()));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().expect("validated spec")
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sizes.windows(2).map(|w| (w[0], w[1]))
    }

    fn check_input(&self, n: usize) -> Result<()> {
        if n != self.inputs() {
            return Err(NeuralError::Shape {
                name: "input".into(),
                detail: format!("expected {}, got {n}", self.inputs()),
            });
        }
        Ok(())
    }

    /// Plain forward pass with the same operation order as [`BoundMlp::forward`].
    pub fn forward_values(&self, store: &ParamStore, net: &str, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let layers = self.sizes.len() - 1;
        let mut h = input.to_vec();
        for k in 0..layers {
            let w = lookup(store, &weight_name(net, k))?;
            let b = lookup(store, &bias_name(net, k))?;
            let mut out: Vec<f64> = w
                .data
                .chunks_exact(h.len())
                .map(|row| row.iter().zip(&h).map(|(a, x)| a * x).sum())
                .collect();
            for (o, bb) in out.iter_mut().zip(&b.data) {
                *o += bb;
            }
            if k + 1 < layers {
                for o in &mut out {
                    if *o <= 0.0 {
                        *o = 0.0;
                    }
                }
            }
            h = out;
        }
        if self.head == Head::LogSoftmax {
            let z = logsumexp(&h);
            for x in &mut h {
                *x -= z;
            }
        }
        Ok(h)
    }
}

fn lookup<'a>(store: &'a ParamStore, name: &str) -> Result<&'a super::Tensor> {
    store
        .get(name)
        .ok_or_else(|| NeuralError::Unknown(name.to_string()))
}

/// An MLP whose parameters are registered leaves on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp<'t> {
    spec: MlpSpec,
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundMlp<'t> {
    pub fn bind(tape: &'t Tape, store: &ParamStore, net: &str) -> Result<Self> {
        let spec = store
            .network(net)
            .ok_or_else(|| NeuralError::Unknown(net.to_string()))?
            .clone();
        let mut layers = Vec::new();
        for (k, (fi, fo)) in spec.layer_dims().enumerate() {
            let wn = weight_name(net, k);
            let bn = bias_name(net, k);
            let w = lookup(store, &wn)?;
            let b = lookup(store, &bn)?;
            if w.len() != fi * fo || b.len() != fo {
                return Err(NeuralError::Shape {
                    name: wn,
                    detail: format!("layer {k} expects {fo}x{fi}"),
                });
            }
            let wv = tape.param(&wn, &w.data, Shape::Vector(w.len()))?;
            let bv = tape.param(&bn, &b.data, Shape::Vector(fo))?;
            layers.push((wv, bv));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn forward(&self, input: Var<'t>) -> Result<Var<'t>> {
        self.spec.check_input(input.len())?;
        let n = self.layers.len();
        let mut h = input;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let rows = b.len();
            h = w.matvec(rows, h) + b;
            if k + 1 < n {
                h = h.relu();
            }
        }
        Ok(match self.spec.head {
            Head::LogSoftmax => h.log_softmax(),
            Head::Linear | Head::SigmoidLogit => h,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::neural::Tensor;
    use crate::stochastics::RngKey;

    fn store() -> (MlpSpec, ParamStore) {
        let spec = MlpSpec::policy(6, 8);
        let s = ParamStore::init(&spec, "policy", RngKey::new(1)).unwrap();
        (spec, s)
    }

    #[test]
    fn zero_network_is_uniform() {
        let (spec, mut s) = store();
        let names: Vec<String> = s.names().cloned().collect();
        for n in names {
            for x in &mut s.get_mut(&n).unwrap().data {
                *x = 0.0;
            }
        }
        let out = spec.forward_values(&s, "policy", &[0.3; 6]).unwrap();
        for o in out {
            assert!((o - (1.0f64 / 8.0).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let (spec, s) = store();
        let x = [0.1, -0.4, 0.9, 0.2, 0.5, -0.7];
        let plain = spec.forward_values(&s, "policy", &x).unwrap();
        let t = Tape::new();
        let m = BoundMlp::bind(&t, &s, "policy").unwrap();
        let y = m.forward(t.vector(&x)).unwrap();
        assert_eq!(y.values(), plain);
        assert!(crate::diffcore::logsumexp(&plain).abs() < 1e-10);
    }

    #[test]
    fn input_shape_checked() {
        let (spec, s) = store();
        assert!(matches!(
            spec.forward_values(&s, "policy", &[0.0; 5]),
            Err(NeuralError::Shape { .. })
        ));
    }

    #[test]
    fn relu_layer_zeroes_negatives() {
        let spec = MlpSpec {
            sizes: vec![1, 2, 1],
            head: Head::Linear,
        };
        let mut s = ParamStore::new();
        s.add_mlp("n", spec.clone(), RngKey::new(0)).unwrap();
        s.insert("n.layer0.weight", Tensor { rows: 2, cols: 1, data: vec![1.0, -1.0] });
        s.insert("n.layer1.weight", Tensor { rows: 1, cols: 2, data: vec![1.0, 1.0] });
        // hidden = relu([2, -2]) = [2, 0]
        assert_eq!(spec.forward_values(&s, "n", &[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn output_gradient_matches_finite_differences() {
        let (_, s) = store();
        let x = [0.1, -0.4, 0.9, 0.2, 0.5, -0.7];
        for out in 0..8 {
            let s = s.clone();
            let err = grad_check(
                move |t, inp| {
                    let m = BoundMlp::bind(t, &s, "policy").unwrap();
                    m.forward(inp).unwrap().pick(out)
                },
                &x,
                1e-6,
            );
            assert!(err < 1e-5, "{err}");
        }
    }
}
