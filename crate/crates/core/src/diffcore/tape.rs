use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;

use super::{DiffError, Result};

/// Shape of a recorded value. Only scalars and flat vectors exist; matrices
/// are row-major vectors interpreted by [`Prim::MatVec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(self) -> bool {
        matches!(self, Shape::Scalar)
    }
}

/// Primitive operations accepted by [`Tape::apply`].
///
/// `Add`, `Sub` and `Mul` broadcast a scalar against a vector; every other
/// binary primitive requires equal shapes.
#[derive(Debug, Clone, Copy)]
pub enum Prim<'a> {
    Add,
    Sub,
    Mul,
    Neg,
    Exp,
    Log,
    Relu,
    Dot,
    /// Row-major `rows x cols` matrix (first input) times vector (second input).
    MatVec { rows: usize },
    Sum,
    LogSumExp,
    /// Select entries by index. The result is a vector of `indices.len()`.
    Gather(&'a [usize]),
    Concat,
    Scale(f64),
}

impl Prim<'_> {
    fn name(&self) -> &'static str {
        match self {
            Prim::Add => "add",
            Prim::Sub => "sub",
            Prim::Mul => "mul",
            Prim::Neg => "neg",
            Prim::Exp => "exp",
            Prim::Log => "log",
            Prim::Relu => "relu",
            Prim::Dot => "dot",
            Prim::MatVec { .. } => "matvec",
            Prim::Sum => "sum",
            Prim::LogSumExp => "logsumexp",
            Prim::Gather(_) => "gather",
            Prim::Concat => "concat",
            Prim::Scale(_) => "scale",
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Neg(u32),
    Exp(u32),
    Log(u32),
    Relu(u32),
    Dot(u32, u32),
    MatVec { m: u32, x: u32, rows: u32 },
    Sum(u32),
    LogSumExp(u32),
    /// Indices live in `side[start..start + len]`.
    Gather { src: u32, start: u32 },
    /// Input node ids live in `side[start..start + count]`.
    Concat { start: u32, count: u32 },
    Scale(u32, f64),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    off: u32,
    len: u32,
    scalar: bool,
}

impl Node {
    fn range(&self) -> std::ops::Range<usize> {
        self.off as usize..(self.off + self.len) as usize
    }

    fn shape(&self) -> Shape {
        if self.scalar {
            Shape::Scalar
        } else {
            Shape::Vector(self.len as usize)
        }
    }
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    values: Vec<f64>,
    side: Vec<u32>,
    params: BTreeMap<String, u32>,
}

impl Inner {
    fn push(&mut self, op: Op, shape: Shape, values: impl IntoIterator<Item = f64>) -> u32 {
        let off = self.values.len() as u32;
        self.values.extend(values);
        let len = self.values.len() as u32 - off;
        debug_assert_eq!(len as usize, shape.len());
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            op,
            off,
            len,
            scalar: shape.is_scalar(),
        });
        id
    }

    fn vals(&self, id: u32) -> &[f64] {
        &self.values[self.nodes[id as usize].range()]
    }
}

/// Recording of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("values", &inner.values.len())
            .field("params", &inner.params.len())
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: u32,
    shape: Shape,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .field("values", &self.values())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn var(&self, id: u32, shape: Shape) -> Var<'_> {
        Var {
            tape: self,
            id,
            shape,
        }
    }

    /// Constant (or unregistered leaf) scalar.
    pub fn scalar(&self, value: f64) -> Var<'_> {
        let id = self
            .inner
            .borrow_mut()
            .push(Op::Leaf, Shape::Scalar, [value]);
        self.var(id, Shape::Scalar)
    }

    /// Constant (or unregistered leaf) vector.
    pub fn vector(&self, values: &[f64]) -> Var<'_> {
        let shape = Shape::Vector(values.len());
        let id = self
            .inner
            .borrow_mut()
            .push(Op::Leaf, shape, values.iter().copied());
        self.var(id, shape)
    }

    /// Registers a named parameter leaf. Re-registering a name replaces the
    /// registry entry but keeps the old node alive.
    pub fn param(&self, name: &str, values: &[f64], shape: Shape) -> Result<Var<'_>> {
        if shape.len() != values.len() {
            return Err(DiffError::Shape {
                op: "param",
                detail: format!("{name}: shape {:?} but {} values", shape, values.len()),
            });
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.push(Op::Leaf, shape, values.iter().copied());
        inner.params.insert(name.to_string(), id);
        Ok(self.var(id, shape))
    }

    /// Looks up a registered parameter.
    pub fn param_var(&self, name: &str) -> Option<Var<'_>> {
        let inner = self.inner.borrow();
        let id = *inner.params.get(name)?;
        let shape = inner.nodes[id as usize].shape();
        Some(self.var(id, shape))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.inner.borrow().params.keys().cloned().collect()
    }

    fn check_owned(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(DiffError::ForeignVar)
        }
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&self, parts: &[Var<'_>]) -> Var<'_> {
        self.apply(Prim::Concat, parts)
            .expect("concat of vars from this tape")
    }

    /// Records `prim` applied to `inputs` and returns the resulting handle.
    pub fn apply(&self, prim: Prim<'_>, inputs: &[Var<'_>]) -> Result<Var<'_>> {
        for v in inputs {
            self.check_owned(v)?;
        }
        let arity = match prim {
            Prim::Add | Prim::Sub | Prim::Mul | Prim::Dot | Prim::MatVec { .. } => Some(2),
            Prim::Concat => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(DiffError::Contract(format!(
                    "{} expects {n} inputs, got {}",
                    prim.name(),
                    inputs.len()
                )));
            }
        }
        let mut inner = self.inner.borrow_mut();
        let (id, shape) = record(&mut inner, prim, inputs)?;
        let node = inner.nodes[id as usize];
        if inner.values[node.range()].iter().any(|v| !v.is_finite()) {
            let op = prim.name();
            // drop the offending node so the tape stays finite
            inner.values.truncate(node.off as usize);
            inner.nodes.pop();
            if let Op::Gather { start, .. } | Op::Concat { start, .. } = node.op {
                inner.side.truncate(start as usize);
            }
            return Err(DiffError::Domain {
                op,
                detail: "non-finite result".into(),
            });
        }
        drop(inner);
        Ok(self.var(id, shape))
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_owned(&root)?;
        if !root.shape.is_scalar() {
            return Err(DiffError::Contract(format!(
                "backward root must be scalar, got {:?}",
                root.shape
            )));
        }
        self.backward_seeded(&[(root, &[1.0])])
    }

    /// Vector-Jacobian product: propagates the given output adjoints.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, &[f64])]) -> Result<Gradients> {
        let inner = self.inner.borrow();
        let mut adj = vec![0.0; inner.values.len()];
        let mut live = vec![false; inner.nodes.len()];
        let mut top = 0usize;
        for (v, seed) in seeds {
            self.check_owned(v)?;
            let node = inner.nodes[v.id as usize];
            if seed.len() != node.len as usize {
                return Err(DiffError::Shape {
                    op: "backward",
                    detail: format!("seed of {} for node of {}", seed.len(), node.len),
                });
            }
            for (a, s) in adj[node.range()].iter_mut().zip(seed.iter()) {
                *a += s;
            }
            live[v.id as usize] = true;
            top = top.max(v.id as usize + 1);
        }
        for id in (0..top).rev() {
            if !live[id] {
                continue;
            }
            let node = inner.nodes[id];
            let (lower, upper) = adj.split_at_mut(node.off as usize);
            let g = &upper[..node.len as usize];
            propagate(&inner, node, g, lower, &mut live);
        }
        Ok(Gradients { adj })
    }
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    match (a, b) {
        (Shape::Scalar, Shape::Scalar) => Ok(Shape::Scalar),
        (Shape::Scalar, v @ Shape::Vector(_)) | (v @ Shape::Vector(_), Shape::Scalar) => Ok(v),
        (Shape::Vector(n), Shape::Vector(m)) if n == m => Ok(Shape::Vector(n)),
        _ => Err(shape_err(op, format!("{a:?} vs {b:?}"))),
    }
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn record(inner: &mut Inner, prim: Prim<'_>, inputs: &[Var<'_>]) -> Result<(u32, Shape)> {
    let name = prim.name();
    let unary = |inner: &mut Inner, op: Op, f: &dyn Fn(f64) -> f64| {
        let x = inputs[0];
        let out: Vec<f64> = inner.vals(x.id).iter().map(|&v| f(v)).collect();
        (inner.push(op, x.shape, out), x.shape)
    };
    let out = match prim {
        Prim::Add | Prim::Sub | Prim::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let shape = broadcast_shape(name, a.shape, b.shape)?;
            let va = inner.vals(a.id);
            let vb = inner.vals(b.id);
            let out: Vec<f64> = (0..shape.len())
                .map(|i| {
                    let (x, y) = (at(va, i), at(vb, i));
                    match prim {
                        Prim::Add => x + y,
                        Prim::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            let op = match prim {
                Prim::Add => Op::Add(a.id, b.id),
                Prim::Sub => Op::Sub(a.id, b.id),
                _ => Op::Mul(a.id, b.id),
            };
            (inner.push(op, shape, out), shape)
        }
        Prim::Neg => unary(inner, Op::Neg(inputs[0].id), &|v| -v),
        Prim::Exp => unary(inner, Op::Exp(inputs[0].id), &f64::exp),
        Prim::Log => {
            let x = inputs[0];
            if let Some(bad) = inner.vals(x.id).iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(DiffError::Domain {
                    op: name,
                    detail: format!("log of non-positive value {bad}"),
                });
            }
            unary(inner, Op::Log(x.id), &f64::ln)
        }
        Prim::Relu => unary(inner, Op::Relu(inputs[0].id), &|v| if v > 0.0 { v } else { 0.0 }),
        Prim::Scale(c) => unary(inner, Op::Scale(inputs[0].id, c), &|v| c * v),
        Prim::Dot => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape.len() != b.shape.len() || a.shape.is_scalar() != b.shape.is_scalar() {
                return Err(shape_err(name, format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            let s: f64 = inner
                .vals(a.id)
                .iter()
                .zip(inner.vals(b.id))
                .map(|(x, y)| x * y)
                .sum();
            (inner.push(Op::Dot(a.id, b.id), Shape::Scalar, [s]), Shape::Scalar)
        }
        Prim::MatVec { rows } => {
            let (m, x) = (inputs[0], inputs[1]);
            let cols = x.shape.len();
            if x.shape.is_scalar() || rows == 0 || m.shape.len() != rows * cols {
                return Err(shape_err(
                    name,
                    format!("matrix {:?} with {rows} rows against {:?}", m.shape, x.shape),
                ));
            }
            let vm = inner.vals(m.id);
            let vx = inner.vals(x.id);
            let out: Vec<f64> = vm
                .chunks_exact(cols)
                .map(|row| row.iter().zip(vx).map(|(w, v)| w * v).sum())
                .collect();
            let shape = Shape::Vector(rows);
            let op = Op::MatVec {
                m: m.id,
                x: x.id,
                rows: rows as u32,
            };
            (inner.push(op, shape, out), shape)
        }
        Prim::Sum => {
            let x = inputs[0];
            let s: f64 = inner.vals(x.id).iter().sum();
            (inner.push(Op::Sum(x.id), Shape::Scalar, [s]), Shape::Scalar)
        }
        Prim::LogSumExp => {
            let x = inputs[0];
            let vals = inner.vals(x.id);
            if vals.is_empty() {
                return Err(shape_err(name, "empty input".into()));
            }
            let s = logsumexp(vals);
            (inner.push(Op::LogSumExp(x.id), Shape::Scalar, [s]), Shape::Scalar)
        }
        Prim::Gather(indices) => {
            let x = inputs[0];
            let n = x.shape.len();
            if let Some(bad) = indices.iter().find(|&&i| i >= n) {
                return Err(shape_err(name, format!("index {bad} out of range {n}")));
            }
            let start = inner.side.len() as u32;
            let vals = inner.vals(x.id);
            let out: Vec<f64> = indices.iter().map(|&i| vals[i]).collect();
            inner.side.extend(indices.iter().map(|&i| i as u32));
            let shape = Shape::Vector(indices.len());
            (inner.push(Op::Gather { src: x.id, start }, shape, out), shape)
        }
        Prim::Concat => {
            if inputs.is_empty() {
                return Err(shape_err(name, "no inputs".into()));
            }
            let start = inner.side.len() as u32;
            let mut out = Vec::with_capacity(inputs.iter().map(|v| v.shape.len()).sum());
            for v in inputs {
                out.extend_from_slice(inner.vals(v.id));
            }
            inner.side.extend(inputs.iter().map(|v| v.id));
            let shape = Shape::Vector(out.len());
            let op = Op::Concat {
                start,
                count: inputs.len() as u32,
            };
            (inner.push(op, shape, out), shape)
        }
    };
    Ok(out)
}

/// Numerically stable `log(sum(exp(v)))`. Returns `-inf` when every entry is `-inf`.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn accumulate_broadcast(dst: &mut [f64], g: &[f64], scale: impl Fn(usize) -> f64) {
    if dst.len() == 1 && g.len() > 1 {
        dst[0] += g.iter().enumerate().map(|(i, gi)| gi * scale(i)).sum::<f64>();
    } else {
        for (i, (d, gi)) in dst.iter_mut().zip(g).enumerate() {
            *d += gi * scale(i);
        }
    }
}

fn propagate(inner: &Inner, node: Node, g: &[f64], adj: &mut [f64], live: &mut [bool]) {
    let nodes = &inner.nodes;
    let vals = |id: u32| &inner.values[nodes[id as usize].range()];
    let mut slot = |id: u32| -> std::ops::Range<usize> {
        live[id as usize] = true;
        nodes[id as usize].range()
    };
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let ra = slot(a);
            accumulate_broadcast(&mut adj[ra], g, |_| 1.0);
            let rb = slot(b);
            accumulate_broadcast(&mut adj[rb], g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            let ra = slot(a);
            accumulate_broadcast(&mut adj[ra], g, |_| 1.0);
            let rb = slot(b);
            accumulate_broadcast(&mut adj[rb], g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (vals(a), vals(b));
            let ra = slot(a);
            accumulate_broadcast(&mut adj[ra], g, |i| at(vb, i));
            let rb = slot(b);
            accumulate_broadcast(&mut adj[rb], g, |i| at(va, i));
        }
        Op::Neg(a) => {
            let ra = slot(a);
            accumulate_broadcast(&mut adj[ra], g, |_| -1.0);
        }
        Op::Scale(a, c) => {
            let ra = slot(a);
            accumulate_broadcast(&mut adj[ra], g, |_| c);
        }
        Op::Exp(a) => {
            let out = &inner.values[node.range()];
            let ra = slot(a);
            accumulate_broadcast(&mut adj[ra], g, |i| out[i]);
        }
        Op::Log(a) => {
            let va = vals(a);
            let ra = slot(a);
            accumulate_broadcast(&mut adj[ra], g, |i| 1.0 / va[i]);
        }
        Op::Relu(a) => {
            let va = vals(a);
            let ra = slot(a);
            accumulate_broadcast(&mut adj[ra], g, |i| if va[i] > 0.0 { 1.0 } else { 0.0 });
        }
        Op::Dot(a, b) => {
            let (va, vb) = (vals(a), vals(b));
            let ra = slot(a);
            for (d, y) in adj[ra].iter_mut().zip(vb) {
                *d += g[0] * y;
            }
            let rb = slot(b);
            for (d, x) in adj[rb].iter_mut().zip(va) {
                *d += g[0] * x;
            }
        }
        Op::MatVec { m, x, rows } => {
            let (vm, vx) = (vals(m), vals(x));
            let cols = vx.len();
            let rm = slot(m);
            for r in 0..rows as usize {
                let gr = g[r];
                if gr == 0.0 {
                    continue;
                }
                let row = &mut adj[rm.start + r * cols..rm.start + (r + 1) * cols];
                for (d, xv) in row.iter_mut().zip(vx) {
                    *d += gr * xv;
                }
            }
            let rx = slot(x);
            let gx = &mut adj[rx];
            for (r, row) in vm.chunks_exact(cols).enumerate() {
                let gr = g[r];
                if gr == 0.0 {
                    continue;
                }
                for (d, w) in gx.iter_mut().zip(row) {
                    *d += gr * w;
                }
            }
        }
        Op::Sum(a) => {
            let ra = slot(a);
            for d in &mut adj[ra] {
                *d += g[0];
            }
        }
        Op::LogSumExp(a) => {
            let va = vals(a);
            let out = inner.values[node.off as usize];
            let ra = slot(a);
            for (d, x) in adj[ra].iter_mut().zip(va) {
                *d += g[0] * (x - out).exp();
            }
        }
        Op::Gather { src, start } => {
            let idx = &inner.side[start as usize..start as usize + node.len as usize];
            let rs = slot(src);
            for (gk, &i) in g.iter().zip(idx) {
                adj[rs.start + i as usize] += gk;
            }
        }
        Op::Concat { start, count } => {
            let ids = &inner.side[start as usize..(start + count) as usize];
            let mut cursor = 0usize;
            for &id in ids {
                let r = slot(id);
                let n = r.len();
                for (d, gk) in adj[r].iter_mut().zip(&g[cursor..cursor + n]) {
                    *d += gk;
                }
                cursor += n;
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    /// Adjoint of `v`; nodes unreachable from the root report zeros.
    pub fn wrt(&self, v: Var<'_>) -> Vec<f64> {
        let inner = v.tape.inner.borrow();
        let r = inner.nodes[v.id as usize].range();
        self.adj.get(r).map(<[f64]>::to_vec).unwrap_or_default()
    }

    pub fn scalar(&self, v: Var<'_>) -> f64 {
        self.wrt(v).first().copied().unwrap_or(0.0)
    }

    /// Adjoints of every registered parameter of `tape`.
    pub fn params(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        let names = tape.param_names();
        names
            .into_iter()
            .filter_map(|n| {
                let v = tape.param_var(&n)?;
                Some((n, self.wrt(v)))
            })
            .collect()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id as usize
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    /// Forward value of a scalar (first entry for vectors).
    pub fn value(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        inner.values[inner.nodes[self.id as usize].off as usize]
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.inner.borrow().vals(self.id).to_vec()
    }

    /// Runs `f` on the forward values without copying them.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(self.tape.inner.borrow().vals(self.id))
    }

    fn op(self, prim: Prim<'_>, others: &[Var<'t>]) -> Var<'t> {
        let mut inputs = Vec::with_capacity(1 + others.len());
        inputs.push(self);
        inputs.extend_from_slice(others);
        match self.tape.apply(prim, &inputs) {
            Ok(v) => v,
            Err(e) => panic!("{e}"),
        }
    }

    pub fn exp(self) -> Var<'t> {
        self.op(Prim::Exp, &[])
    }

    /// Natural logarithm. Panics on non-positive input; use [`Tape::apply`]
    /// to get the domain error instead.
    pub fn ln(self) -> Var<'t> {
        self.op(Prim::Log, &[])
    }

    pub fn relu(self) -> Var<'t> {
        self.op(Prim::Relu, &[])
    }

    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        self.op(Prim::Dot, &[other])
    }

    /// `self` is a row-major matrix with `rows` rows.
    pub fn matvec(self, rows: usize, x: Var<'t>) -> Var<'t> {
        self.op(Prim::MatVec { rows }, &[x])
    }

    pub fn sum(self) -> Var<'t> {
        self.op(Prim::Sum, &[])
    }

    pub fn logsumexp(self) -> Var<'t> {
        self.op(Prim::LogSumExp, &[])
    }

    pub fn gather(self, indices: &[usize]) -> Var<'t> {
        self.op(Prim::Gather(indices), &[])
    }

    /// Single entry as a scalar; backward scatters into that entry only.
    pub fn pick(self, index: usize) -> Var<'t> {
        let g = self.gather(&[index]);
        let mut inner = self.tape.inner.borrow_mut();
        inner.nodes[g.id as usize].scalar = true;
        Var {
            shape: Shape::Scalar,
            ..g
        }
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.op(Prim::Scale(c), &[])
    }

    /// `self - logsumexp(self)`.
    pub fn log_softmax(self) -> Var<'t> {
        let z = self.logsumexp();
        self - z
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $prim:expr) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.op($prim, &[rhs])
            }
        }
    };
}

binop!(Add, add, Prim::Add);
binop!(Sub, sub, Prim::Sub);
binop!(Mul, mul, Prim::Mul);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.op(Prim::Neg, &[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_forward_and_backward() {
        let t = Tape::new();
        let x = t.scalar(2.0);
        let y = t.scalar(3.0);
        let f = x * y;
        assert_eq!(f.value(), 6.0);
        let g = t.backward(f).unwrap();
        assert_eq!(g.scalar(x), 3.0);
        assert_eq!(g.scalar(y), 2.0);
    }

    #[test]
    fn log_derivative() {
        let t = Tape::new();
        let x = t.scalar(2.0);
        let g = t.backward(x.ln()).unwrap();
        assert_eq!(g.scalar(x), 0.5);
    }

    #[test]
    fn uniform_logsumexp() {
        let t = Tape::new();
        let z = t.vector(&[0.0; 4]);
        assert!((z.logsumexp().value() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn relu_values() {
        let t = Tape::new();
        assert_eq!(t.vector(&[-1.0, 2.0]).relu().values(), vec![0.0, 2.0]);
        // subgradient at zero is zero
        let x = t.scalar(0.0);
        let g = t.backward(x.relu()).unwrap();
        assert_eq!(g.scalar(x), 0.0);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let t = Tape::new();
        let x = t.scalar(0.0);
        let err = t.apply(Prim::Log, &[x]).unwrap_err();
        assert!(matches!(err, DiffError::Domain { .. }));
        let before = t.len();
        assert!(t.apply(Prim::Exp, &[t.scalar(1e6)]).is_err());
        assert_eq!(t.len(), before + 1, "overflowing node is not kept");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let t = Tape::new();
        let a = t.vector(&[1.0, 2.0]);
        let b = t.vector(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            t.apply(Prim::Add, &[a, b]),
            Err(DiffError::Shape { .. })
        ));
        assert!(matches!(
            t.apply(Prim::Dot, &[a, b]),
            Err(DiffError::Shape { .. })
        ));
        assert!(matches!(
            t.apply(Prim::MatVec { rows: 2 }, &[a, b]),
            Err(DiffError::Shape { .. })
        ));
        assert!(matches!(
            t.apply(Prim::Gather(&[5]), &[a]),
            Err(DiffError::Shape { .. })
        ));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let t = Tape::new();
        let a = t.vector(&[1.0, 2.0]);
        assert!(matches!(t.backward(a), Err(DiffError::Contract(_))));
    }

    #[test]
    fn foreign_vars_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.scalar(1.0);
        let b = t2.scalar(1.0);
        assert_eq!(t1.apply(Prim::Add, &[a, b]).unwrap_err(), DiffError::ForeignVar);
    }

    #[test]
    fn unreachable_params_get_zero() {
        let t = Tape::new();
        let a = t.param("a", &[1.0], Shape::Scalar).unwrap();
        let b = t.param("b", &[2.0], Shape::Scalar).unwrap();
        let f = a * a;
        let g = t.backward(f).unwrap();
        let p = g.params(&t);
        assert_eq!(p["a"], vec![2.0]);
        assert_eq!(p["b"], vec![0.0]);
        assert_eq!(g.scalar(b), 0.0);
    }

    #[test]
    fn gather_scatters_to_selected_entry() {
        let t = Tape::new();
        let z = t.vector(&[0.1, 0.2, 0.3]);
        let f = z.pick(1);
        assert!(f.shape().is_scalar());
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(z), vec![0.0, 1.0, 0.0]);
        let h = z.gather(&[2, 2, 0]).sum();
        let g = t.backward(h).unwrap();
        assert_eq!(g.wrt(z), vec![1.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcast_backward_sums() {
        let t = Tape::new();
        let s = t.scalar(2.0);
        let v = t.vector(&[1.0, 2.0, 3.0]);
        let f = (s * v).sum();
        let g = t.backward(f).unwrap();
        assert_eq!(g.scalar(s), 6.0);
        assert_eq!(g.wrt(v), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn matvec_matches_manual() {
        let t = Tape::new();
        let m = t.vector(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = t.vector(&[1.0, -1.0, 2.0]);
        let y = m.matvec(2, x);
        assert_eq!(y.values(), vec![5.0, 11.0]);
        let g = t.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(x), vec![5.0, 7.0, 9.0]);
        assert_eq!(g.wrt(m), vec![1.0, -1.0, 2.0, 1.0, -1.0, 2.0]);
    }

    #[test]
    fn seeded_backward_is_vjp() {
        let t = Tape::new();
        let x = t.vector(&[1.0, 2.0]);
        let y = x.exp();
        let g = t.backward_seeded(&[(y, &[1.0, 0.5])]).unwrap();
        let gx = g.wrt(x);
        assert!((gx[0] - 1f64.exp()).abs() < 1e-12);
        assert!((gx[1] - 0.5 * 2f64.exp()).abs() < 1e-12);
    }
}
