//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every forward call appends a node holding its output value and the
//! indices of its parents, so node order is a valid topological order.
//! `backward` walks the nodes once in reverse and accumulates adjoints
//! additively, which handles shared subexpressions. A tape supports a single
//! backward pass; start a new tape for the next forward graph.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use super::kernels::{self, broadcast_index_map, broadcast_shape, reduce_to, split_axis};
use super::params::{ParamId, ParamStore};
use super::tensor::numel;
use super::{Real, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Tanh,
    Softplus,
    Sigmoid,
    Relu,
    Neg,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Tanh => "tanh",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Neg => "neg",
            Unary::Square => "square",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Minimum,
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the output adjoint and the forward input values, and
/// returns one adjoint per input (or `None` where no gradient flows).
pub trait CustomBackward<T: Real> {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_out: &[T], inputs: &[&Tensor<T>]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Clamp(usize, T, T),
    MatMul(usize, usize),
    Bmm(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reduce {
        x: usize,
        axis: usize,
        mean: bool,
    },
    ReduceAll {
        x: usize,
        mean: bool,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Softmax(usize),
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn CustomBackward<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var>>,
    consumed: Cell<bool>,
    track: bool,
    /// Mutation hook for sensitivity tests of the gradient checker.
    corrupt: Cell<Option<(&'static str, f64)>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

type Res = Result<Var, TensorError>;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            consumed: Cell::new(false),
            track: true,
            corrupt: Cell::new(None),
        }
    }

    /// A tape whose leaves never require gradients (inference only).
    pub fn no_grad() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scales the adjoint produced by every op with the given name. Only
    /// useful for proving that the gradient checker detects broken rules.
    pub fn corrupt_adjoint(&self, op_name: &'static str, factor: f64) {
        self.corrupt.set(Some((op_name, factor)));
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Res {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Res {
        self.push(value, Op::Leaf, requires_grad && self.track, "leaf")
    }

    pub fn constant(&self, value: Tensor<T>) -> Res {
        self.leaf(value, false)
    }

    /// Records a parameter leaf. Repeated requests for the same id return
    /// the same node so adjoints from every use accumulate in one place.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let v = self
            .leaf(store.get(id).clone(), true)
            .expect("parameters are finite");
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Makes later `param(_, id)` calls resolve to an existing node.
    pub fn bind_param(&self, id: ParamId, v: Var) {
        self.params.borrow_mut().insert(id, v);
    }

    // ---------------------------------------------------------------- unary

    pub fn unary(&self, op: Unary, a: Var) -> Res {
        let x = self.value(a);
        let out = match op {
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Softplus => x.map(kernels::softplus),
            Unary::Sigmoid => x.map(kernels::sigmoid),
            Unary::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Unary::Neg => x.map(|v| -v),
            Unary::Square => x.map(|v| v * v),
        };
        self.push(out, Op::Unary(op, a.0), self.rg(a), op.name())
    }

    pub fn exp(&self, a: Var) -> Res {
        self.unary(Unary::Exp, a)
    }
    pub fn tanh(&self, a: Var) -> Res {
        self.unary(Unary::Tanh, a)
    }
    pub fn softplus(&self, a: Var) -> Res {
        self.unary(Unary::Softplus, a)
    }
    pub fn sigmoid(&self, a: Var) -> Res {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn relu(&self, a: Var) -> Res {
        self.unary(Unary::Relu, a)
    }
    pub fn neg(&self, a: Var) -> Res {
        self.unary(Unary::Neg, a)
    }
    pub fn square(&self, a: Var) -> Res {
        self.unary(Unary::Square, a)
    }

    pub fn scale(&self, a: Var, c: f64) -> Res {
        let c = T::of(c);
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a.0, c), self.rg(a), "scale")
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Res {
        let c = T::of(c);
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a.0), self.rg(a), "add_scalar")
    }

    /// Clamps into `[lo, hi]`; the adjoint passes only inside the closed range.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Res {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = self.value(a).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(a.0, lo, hi), self.rg(a), "clamp")
    }

    // --------------------------------------------------------------- binary

    pub fn binary(&self, op: Binary, a: Var, b: Var) -> Res {
        let (x, y) = (self.value(a), self.value(b));
        let shape = broadcast_shape(x.shape(), y.shape()).ok_or_else(|| {
            TensorError::Broadcast(x.shape().to_vec(), y.shape().to_vec())
        })?;
        let ma = broadcast_index_map(x.shape(), &shape);
        let mb = broadcast_index_map(y.shape(), &shape);
        let (xd, yd) = (x.data(), y.data());
        let f = |p: T, q: T| match op {
            Binary::Add => p + q,
            Binary::Sub => p - q,
            Binary::Mul => p * q,
            Binary::Minimum => p.min(q),
        };
        let data: Vec<T> = ma.iter().zip(&mb).map(|(&i, &j)| f(xd[i], yd[j])).collect();
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Minimum => "minimum",
        };
        self.push(
            Tensor::from_parts(shape, data),
            Op::Binary(op, a.0, b.0),
            self.rg(a) || self.rg(b),
            name,
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Res {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&self, a: Var, b: Var) -> Res {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&self, a: Var, b: Var) -> Res {
        self.binary(Binary::Mul, a, b)
    }
    pub fn minimum(&self, a: Var, b: Var) -> Res {
        self.binary(Binary::Minimum, a, b)
    }

    // --------------------------------------------------------------- matmul

    /// `a[..., k] · b[k, n] -> [..., n]`
    pub fn matmul(&self, a: Var, b: Var) -> Res {
        let (x, w) = (self.value(a), self.value(b));
        if x.rank() < 1 || w.rank() != 2 || x.shape()[x.rank() - 1] != w.shape()[0] {
            return Err(TensorError::Shape(format!(
                "matmul {:?} x {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let k = w.shape()[0];
        let n = w.shape()[1];
        let m = x.len() / k.max(1);
        let data = kernels::matmul(x.data(), w.data(), m, k, n);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(
            Tensor::from_parts(shape, data),
            Op::MatMul(a.0, b.0),
            self.rg(a) || self.rg(b),
            "matmul",
        )
    }

    /// Batched product `a[B, m, k] · b[B, k, n] -> [B, m, n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Res {
        let (x, y) = (self.value(a), self.value(b));
        let (xs, ys) = (x.shape(), y.shape());
        if xs.len() != 3 || ys.len() != 3 || xs[0] != ys[0] || xs[2] != ys[1] {
            return Err(TensorError::Shape(format!("bmm {:?} x {:?}", xs, ys)));
        }
        let (bsz, m, k, n) = (xs[0], xs[1], xs[2], ys[2]);
        let mut data = Vec::with_capacity(bsz * m * n);
        for bi in 0..bsz {
            data.extend(kernels::matmul(
                &x.data()[bi * m * k..(bi + 1) * m * k],
                &y.data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        self.push(
            Tensor::from_parts(vec![bsz, m, n], data),
            Op::Bmm(a.0, b.0),
            self.rg(a) || self.rg(b),
            "bmm",
        )
    }

    // ------------------------------------------------------------ layernorm

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Res {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| TensorError::Shape("layernorm on scalar".into()))?;
        if d < 2 {
            return Err(TensorError::Degenerate(format!(
                "layernorm over an axis of length {d}"
            )));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != [d] || b.shape() != [d] {
            return Err(TensorError::Shape(format!(
                "layernorm affine {:?}/{:?} for width {d}",
                g.shape(),
                b.shape()
            )));
        }
        let eps = T::of(eps);
        let rows = xv.len() / d;
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g.data()[i] + b.data()[i]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
            "layernorm",
        )
    }

    // ----------------------------------------------------------- reductions

    pub fn sum(&self, x: Var, axis: usize) -> Res {
        self.reduce(x, axis, false)
    }

    pub fn mean(&self, x: Var, axis: usize) -> Res {
        self.reduce(x, axis, true)
    }

    fn reduce(&self, x: Var, axis: usize, mean: bool) -> Res {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::Axis { axis, rank: xv.rank() });
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        if n == 0 {
            return Err(TensorError::Empty("reduction over an empty axis"));
        }
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xv.data()[base + i];
                }
            }
        }
        if mean {
            let s = T::one() / T::of(n as f64);
            out.iter_mut().for_each(|v| *v = *v * s);
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Reduce { x: x.0, axis, mean },
            self.rg(x),
            if mean { "mean" } else { "sum" },
        )
    }

    pub fn sum_all(&self, x: Var) -> Res {
        self.reduce_all(x, false)
    }

    pub fn mean_all(&self, x: Var) -> Res {
        self.reduce_all(x, true)
    }

    fn reduce_all(&self, x: Var, mean: bool) -> Res {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(TensorError::Empty("reduction of an empty tensor"));
        }
        let mut s = xv.data().iter().copied().sum::<T>();
        if mean {
            s = s / T::of(xv.len() as f64);
        }
        self.push(
            Tensor::scalar(s),
            Op::ReduceAll { x: x.0, mean },
            self.rg(x),
            if mean { "mean" } else { "sum" },
        )
    }

    // -------------------------------------------------------------- layout

    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Res {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::Axis { axis, rank: xv.rank() });
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        if start > end || end > n {
            return Err(TensorError::Shape(format!(
                "slice {start}..{end} of axis with length {n}"
            )));
        }
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        self.push(
            Tensor::from_parts(shape, data),
            Op::Slice { x: x.0, axis, start },
            self.rg(x),
            "slice",
        )
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Res {
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = vals.first().ok_or(TensorError::Empty("concat of nothing"))?;
        if axis >= first.rank() {
            return Err(TensorError::Axis { axis, rank: first.rank() });
        }
        let mut shape = first.shape().to_vec();
        let mut total = 0;
        for v in &vals {
            let mut s = v.shape().to_vec();
            if s.len() != shape.len() {
                return Err(TensorError::Shape("concat rank mismatch".into()));
            }
            total += s[axis];
            s[axis] = shape[axis];
            if s != shape {
                return Err(TensorError::Shape(format!(
                    "concat {:?} with {:?}",
                    v.shape(),
                    first.shape()
                )));
            }
        }
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &vals {
                let n = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            rg,
            "concat",
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Res {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x.0), self.rg(x), "reshape")
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Res {
        let xv = self.value(x);
        let mut seen = vec![false; xv.rank()];
        if axes.len() != xv.rank() || axes.iter().any(|&a| a >= xv.rank() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Shape(format!(
                "permutation {:?} of rank {}",
                axes,
                xv.rank()
            )));
        }
        let (data, shape) = kernels::permute(xv.data(), xv.shape(), axes);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Permute(x.0, axes.to_vec()),
            self.rg(x),
            "permute",
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Res {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| TensorError::Shape("softmax on scalar".into()))?;
        if d == 0 {
            return Err(TensorError::Empty("softmax over an empty axis"));
        }
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut z = T::zero();
            for &v in row {
                let e = (v - mx).exp();
                z = z + e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / z);
        }
        self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::Softmax(x.0),
            self.rg(x),
            "softmax",
        )
    }

    /// Records an externally computed output together with its backward rule.
    pub fn custom(&self, inputs: &[Var], output: Tensor<T>, rule: Box<dyn CustomBackward<T>>) -> Res {
        let rg = inputs.iter().any(|&v| self.rg(v));
        let name = rule.name();
        self.push(
            output,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                rule,
            },
            rg,
            name,
        )
    }

    // ------------------------------------------------------------- backward

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed.replace(true) {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(nodes[loss.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let corrupt = self.corrupt.get();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut contributions = backward_node(&nodes, idx, &g);
            if let Some((name, factor)) = corrupt {
                if op_name(&node.op) == name {
                    let f = T::of(factor);
                    for (_, c) in contributions.iter_mut() {
                        c.iter_mut().for_each(|v| *v = *v * f);
                    }
                }
            }
            for (p, c) in contributions {
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, v)| *a = *a + *v),
                    slot @ None => *slot = Some(c),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let mut by_node = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                by_node.insert(i, Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        let params = self.params.borrow().iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { by_node, params })
    }
}

fn op_name<T: Real>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Unary(u, _) => u.name(),
        Op::Binary(b, _, _) => match b {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Minimum => "minimum",
        },
        Op::Scale(..) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::Clamp(..) => "clamp",
        Op::MatMul(..) => "matmul",
        Op::Bmm(..) => "bmm",
        Op::LayerNorm { .. } => "layernorm",
        Op::Reduce { mean, .. } | Op::ReduceAll { mean, .. } => {
            if *mean {
                "mean"
            } else {
                "sum"
            }
        }
        Op::Slice { .. } => "slice",
        Op::Concat { .. } => "concat",
        Op::Reshape(_) => "reshape",
        Op::Permute(..) => "permute",
        Op::Softmax(_) => "softmax",
        Op::Custom { rule, .. } => rule.name(),
    }
}

fn backward_node<T: Real>(nodes: &[Node<T>], idx: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let node = &nodes[idx];
    let out = node.value.data();
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Unary(u, a) => {
            let x = val(*a).data();
            let grad: Vec<T> = match u {
                Unary::Exp => g.iter().zip(out).map(|(&g, &y)| g * y).collect(),
                Unary::Tanh => g.iter().zip(out).map(|(&g, &y)| g * (T::one() - y * y)).collect(),
                Unary::Softplus => g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| g * kernels::sigmoid(x))
                    .collect(),
                Unary::Sigmoid => g
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect(),
                Unary::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
                Unary::Neg => g.iter().map(|&g| -g).collect(),
                Unary::Square => g.iter().zip(x).map(|(&g, &x)| T::of(2.0) * x * g).collect(),
            };
            vec![(*a, grad)]
        }
        Op::Binary(op, a, b) => {
            let (xa, xb) = (val(*a), val(*b));
            let shape = node.value.shape();
            let ma = broadcast_index_map(xa.shape(), shape);
            let mb = broadcast_index_map(xb.shape(), shape);
            let (ad, bd) = (xa.data(), xb.data());
            let (ga, gb): (Vec<T>, Vec<T>) = match op {
                Binary::Add => (g.to_vec(), g.to_vec()),
                Binary::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                Binary::Mul => (
                    g.iter().zip(&mb).map(|(&g, &j)| g * bd[j]).collect(),
                    g.iter().zip(&ma).map(|(&g, &i)| g * ad[i]).collect(),
                ),
                Binary::Minimum => {
                    let pick_a: Vec<bool> = ma.iter().zip(&mb).map(|(&i, &j)| ad[i] <= bd[j]).collect();
                    (
                        g.iter().zip(&pick_a).map(|(&g, &p)| if p { g } else { T::zero() }).collect(),
                        g.iter().zip(&pick_a).map(|(&g, &p)| if p { T::zero() } else { g }).collect(),
                    )
                }
            };
            vec![
                (*a, reduce_to(&ga, &ma, xa.len())),
                (*b, reduce_to(&gb, &mb, xb.len())),
            ]
        }
        Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
        Op::AddScalar(a) => vec![(*a, g.to_vec())],
        Op::Clamp(a, lo, hi) => {
            let x = val(*a).data();
            vec![(
                *a,
                g.iter()
                    .zip(x)
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { T::zero() })
                    .collect(),
            )]
        }
        Op::MatMul(a, b) => {
            let (x, w) = (val(*a), val(*b));
            let k = w.shape()[0];
            let n = w.shape()[1];
            let m = x.len() / k.max(1);
            vec![
                (*a, kernels::matmul_bt(g, w.data(), m, n, k)),
                (*b, kernels::matmul_at(x.data(), g, m, k, n)),
            ]
        }
        Op::Bmm(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (bsz, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let n = y.shape()[2];
            let mut ga = Vec::with_capacity(x.len());
            let mut gb = Vec::with_capacity(y.len());
            for bi in 0..bsz {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                ga.extend(kernels::matmul_bt(gs, &y.data()[bi * k * n..(bi + 1) * k * n], m, n, k));
                gb.extend(kernels::matmul_at(&x.data()[bi * m * k..(bi + 1) * m * k], gs, m, k, n));
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = val(*gain).data();
            let d = gv.len();
            let rows = xhat.len() / d;
            let mut gx = vec![T::zero(); xhat.len()];
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            let inv_d = T::one() / T::of(d as f64);
            for r in 0..rows {
                let gy = &g[r * d..(r + 1) * d];
                let xh = &xhat[r * d..(r + 1) * d];
                let mut mean_dxh = T::zero();
                let mut mean_dxh_xh = T::zero();
                for i in 0..d {
                    let dxh = gy[i] * gv[i];
                    mean_dxh = mean_dxh + dxh;
                    mean_dxh_xh = mean_dxh_xh + dxh * xh[i];
                    gg[i] = gg[i] + gy[i] * xh[i];
                    gb[i] = gb[i] + gy[i];
                }
                mean_dxh = mean_dxh * inv_d;
                mean_dxh_xh = mean_dxh_xh * inv_d;
                for i in 0..d {
                    let dxh = gy[i] * gv[i];
                    gx[r * d + i] = rstd[r] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                }
            }
            vec![(*x, gx), (*gain, gg), (*bias, gb)]
        }
        Op::Reduce { x, axis, mean } => {
            let xs = val(*x).shape();
            let (outer, n, inner) = split_axis(xs, *axis);
            let s = if *mean { T::one() / T::of(n as f64) } else { T::one() };
            let mut gx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    gx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * s));
                }
            }
            vec![(*x, gx)]
        }
        Op::ReduceAll { x, mean } => {
            let n = val(*x).len();
            let s = if *mean { g[0] / T::of(n as f64) } else { g[0] };
            vec![(*x, vec![s; n])]
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape();
            let (outer, n, inner) = split_axis(xs, *axis);
            let len = node.value.shape()[*axis];
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*x, gx)]
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let (outer, total, inner) = split_axis(shape, *axis);
            let mut res: Vec<(usize, Vec<T>)> = parts
                .iter()
                .map(|&p| (p, Vec::with_capacity(val(p).len())))
                .collect();
            for o in 0..outer {
                let mut off = 0;
                for (k, &p) in parts.iter().enumerate() {
                    let n = val(p).shape()[*axis];
                    let src = (o * total + off) * inner;
                    res[k].1.extend_from_slice(&g[src..src + n * inner]);
                    off += n;
                }
            }
            res
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Permute(x, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (gx, _) = kernels::permute(g, node.value.shape(), &inverse);
            vec![(*x, gx)]
        }
        Op::Softmax(x) => {
            let d = *node.value.shape().last().unwrap();
            let mut gx = Vec::with_capacity(out.len());
            for (yr, gr) in out.chunks(d).zip(g.chunks(d)) {
                let dot = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum::<T>();
                gx.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
            }
            vec![(*x, gx)]
        }
        Op::Custom { inputs, rule } => {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            rule.backward(g, &vals)
                .into_iter()
                .zip(inputs)
                .filter_map(|(gr, &i)| gr.map(|v| (i, v)))
                .collect()
        }
    }
}

/// Adjoints of every gradient-requiring leaf of a consumed tape.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    by_node: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(&v.0)
    }

    /// Gradient of a leaf; a leaf the loss does not depend on gets zeros.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.by_node
            .get(&v.0)
            .expect("gradient requested for a node that is not a grad-requiring leaf")
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.by_node.get(&v.0))
    }

    /// Parameter gradients, ordered by parameter id.
    pub fn params(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(p, v)| self.by_node.get(&v.0).map(|g| (*p, g.clone())))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}
