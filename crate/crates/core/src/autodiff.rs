//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only record of operations. Every operation
//! returns a [`Var`], a cheap copyable handle into the graph. Because nodes
//! are only ever appended, the record is topologically ordered by
//! construction and [`Graph::backward`] is a single reverse sweep.
//!
//! Elementwise binary operations accept either identical shapes or one
//! single-element operand (scalar broadcast). Anything else is a
//! [`TensorError::ShapeMismatch`].

use std::cell::{Cell, Ref, RefCell};

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddConst(usize),
    Scale(usize, S),
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    Conv1d { x: usize, k: usize },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Softplus(usize),
    Softmax { input: usize, axis: usize },
    LogSoftmax { input: usize, axis: usize },
    Sum(usize),
    Mean(usize),
    SumAxis { input: usize, axis: usize },
    MeanAxis { input: usize, axis: usize },
    Gather { input: usize, indices: Vec<usize> },
    Reshape(usize),
    RowBlend { w: usize, a: usize, b: usize },
    StraightThrough { soft: usize },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddConst(..) => "add_const",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv1d { .. } => "conv1d",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Softplus(..) => "softplus",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::RowBlend { .. } => "row_blend",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: RefCell<Vec<Node<S>>>,
    backward_done: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Debug)]
pub struct Var<'g, S> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<S> Copy for Var<'_, S> {}

/// `(outer, len, inner)` strides for reducing or normalizing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &e)| e)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn softmax_into<S: Scalar>(x: &[S], shape: &[usize], axis: usize, log: bool) -> Vec<S> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + i;
            let mut m = S::neg_infinity();
            for j in 0..len {
                m = m.max(x[idx(j)]);
            }
            let mut z = S::zero();
            for j in 0..len {
                z += (x[idx(j)] - m).exp();
            }
            let lz = z.ln();
            for j in 0..len {
                let v = x[idx(j)] - m;
                out[idx(j)] = if log { v - lz } else { v.exp() / z };
            }
        }
    }
    out
}

fn softplus<S: Scalar>(x: S) -> S {
    // log(1 + e^x) without overflow
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, delta: Vec<S>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn node(&self, id: usize) -> Ref<'_, Node<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Adds a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&self, value: S) -> Var<'_, S> {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var<'_, S>) -> Tensor<S> {
        self.node(v.id).value.clone()
    }

    pub fn shape(&self, v: Var<'_, S>) -> Vec<usize> {
        self.node(v.id).value.shape().to_vec()
    }

    /// Gradient accumulated by the last backward pass, if any reached `v`.
    pub fn grad(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        let node = self.node(v.id);
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clears all gradients so that backward may run again.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
        self.backward_done.set(false);
    }

    fn binary(&self, op: &'static str, a: Var<'_, S>, b: Var<'_, S>, f: impl Fn(S, S) -> S) -> TensorResult<Tensor<S>> {
        let na = self.node(a.id);
        let nb = self.node(b.id);
        let (ta, tb) = (&na.value, &nb.value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.data()[0];
            Ok(ta.map(|x| f(x, y)))
        } else if ta.is_scalar() {
            let x = ta.data()[0];
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn unary(&self, a: Var<'_, S>, f: impl Fn(S) -> S) -> Tensor<S> {
        self.node(a.id).value.map(f)
    }

    fn check_axis(&self, op: &'static str, a: Var<'_, S>, axis: usize) -> TensorResult<Vec<usize>> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op,
                axis,
                rank: shape.len(),
            });
        }
        Ok(shape)
    }

    /// Runs reverse-mode differentiation from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> TensorResult<()> {
        if self.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        {
            let n = self.node(loss.id);
            if !n.value.is_scalar() {
                return Err(TensorError::NonScalarLoss(n.value.shape().to_vec()));
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![S::one()]);

        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &g, &mut grads);
            nodes[id].grad = Some(g);
        }
        self.backward_done.set(true);
        Ok(())
    }
}

/// Pushes the gradient `g` of `node` into the gradient slots of its inputs.
fn backprop_node<S: Scalar>(nodes: &[Node<S>], node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    // reduce a same-shape-as-output gradient into input `i` (handles scalar broadcast)
    let fold = |i: usize, d: Vec<S>| -> Vec<S> {
        if nodes[i].value.numel() == d.len() {
            d
        } else {
            vec![d.into_iter().sum()]
        }
    };
    let bcast = |i: usize, k: usize| -> S {
        let t = &nodes[i].value;
        if t.is_scalar() {
            t.data()[0]
        } else {
            t.data()[k]
        }
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(&mut grads[*a], fold(*a, g.to_vec()));
            }
            if rg(*b) {
                accumulate(&mut grads[*b], fold(*b, g.to_vec()));
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(&mut grads[*a], fold(*a, g.to_vec()));
            }
            if rg(*b) {
                accumulate(&mut grads[*b], fold(*b, g.iter().map(|&x| -x).collect()));
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let d = g.iter().enumerate().map(|(k, &gk)| gk * bcast(*b, k)).collect();
                accumulate(&mut grads[*a], fold(*a, d));
            }
            if rg(*b) {
                let d = g.iter().enumerate().map(|(k, &gk)| gk * bcast(*a, k)).collect();
                accumulate(&mut grads[*b], fold(*b, d));
            }
        }
        Op::AddConst(a) => accumulate(&mut grads[*a], g.to_vec()),
        Op::Scale(a, c) => accumulate(&mut grads[*a], g.iter().map(|&x| x * *c).collect()),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if rg(*a) {
                accumulate(&mut grads[*a], matmul_nt(g, tb.data(), m, n, k));
            }
            if rg(*b) {
                accumulate(&mut grads[*b], matmul_tn(ta.data(), g, k, m, n));
            }
        }
        Op::Linear { x, w, b } => {
            let (tx, tw) = (val(*x), val(*w));
            let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
            if rg(*x) {
                accumulate(&mut grads[*x], matmul_nt(g, tw.data(), m, n, k));
            }
            if rg(*w) {
                accumulate(&mut grads[*w], matmul_tn(tx.data(), g, k, m, n));
            }
            if rg(*b) {
                let mut db = vec![S::zero(); n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                }
                accumulate(&mut grads[*b], db);
            }
        }
        Op::Conv1d { x, k } => {
            let (tx, tk) = (val(*x), val(*k));
            let (n, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let (cout, kw) = (tk.shape()[0], tk.shape()[2]);
            let lout = len - kw + 1;
            let mut dx = vec![S::zero(); tx.numel()];
            let mut dk = vec![S::zero(); tk.numel()];
            for s in 0..n {
                for o in 0..cout {
                    for p in 0..lout {
                        let go = g[(s * cout + o) * lout + p];
                        for c in 0..cin {
                            for q in 0..kw {
                                let xi = (s * cin + c) * len + p + q;
                                let ki = (o * cin + c) * kw + q;
                                dx[xi] += go * tk.data()[ki];
                                dk[ki] += go * tx.data()[xi];
                            }
                        }
                    }
                }
            }
            if rg(*x) {
                accumulate(&mut grads[*x], dx);
            }
            if rg(*k) {
                accumulate(&mut grads[*k], dk);
            }
        }
        Op::Relu(a) => {
            let d = val(*a)
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gk)| if x > S::zero() { gk } else { S::zero() })
                .collect();
            accumulate(&mut grads[*a], d);
        }
        Op::Sigmoid(a) => {
            let d = node
                .value
                .data()
                .iter()
                .zip(g)
                .map(|(&y, &gk)| gk * y * (S::one() - y))
                .collect();
            accumulate(&mut grads[*a], d);
        }
        Op::Exp(a) => {
            let d = node.value.data().iter().zip(g).map(|(&y, &gk)| gk * y).collect();
            accumulate(&mut grads[*a], d);
        }
        Op::Log(a) => {
            let d = val(*a).data().iter().zip(g).map(|(&x, &gk)| gk / x).collect();
            accumulate(&mut grads[*a], d);
        }
        Op::Abs(a) => {
            let d = val(*a)
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gk)| {
                    if x > S::zero() {
                        gk
                    } else if x < S::zero() {
                        -gk
                    } else {
                        S::zero()
                    }
                })
                .collect();
            accumulate(&mut grads[*a], d);
        }
        Op::Softplus(a) => {
            let d = val(*a).data().iter().zip(g).map(|(&x, &gk)| gk * sigmoid(x)).collect();
            accumulate(&mut grads[*a], d);
        }
        Op::Softmax { input, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            let mut d = vec![S::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| o * len * inner + j * inner + i;
                    let dot: S = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            accumulate(&mut grads[*input], d);
        }
        Op::LogSoftmax { input, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            let mut d = vec![S::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| o * len * inner + j * inner + i;
                    let gs: S = (0..len).map(|j| g[idx(j)]).sum();
                    for j in 0..len {
                        d[idx(j)] = g[idx(j)] - y[idx(j)].exp() * gs;
                    }
                }
            }
            accumulate(&mut grads[*input], d);
        }
        Op::Sum(a) => accumulate(&mut grads[*a], vec![g[0]; val(*a).numel()]),
        Op::Mean(a) => {
            let n = val(*a).numel();
            accumulate(&mut grads[*a], vec![g[0] / S::lit(n as f64); n]);
        }
        Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
            let shape = val(*input).shape();
            let (outer, len, inner) = axis_split(shape, *axis);
            let scale = match node.op {
                Op::MeanAxis { .. } => S::one() / S::lit(len as f64),
                _ => S::one(),
            };
            let mut d = vec![S::zero(); outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        d[o * len * inner + j * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            accumulate(&mut grads[*input], d);
        }
        Op::Gather { input, indices } => {
            let mut d = vec![S::zero(); val(*input).numel()];
            for (&ix, &gk) in indices.iter().zip(g) {
                d[ix] += gk;
            }
            accumulate(&mut grads[*input], d);
        }
        Op::Reshape(a) => accumulate(&mut grads[*a], g.to_vec()),
        Op::RowBlend { w, a, b } => {
            let (tw, ta, tb) = (val(*w), val(*a), val(*b));
            let cols = ta.shape()[1];
            if rg(*w) {
                let d = (0..tw.numel())
                    .map(|r| {
                        (0..cols)
                            .map(|c| {
                                let k = r * cols + c;
                                g[k] * (ta.data()[k] - tb.data()[k])
                            })
                            .sum()
                    })
                    .collect();
                accumulate(&mut grads[*w], d);
            }
            if rg(*a) {
                let d = g
                    .iter()
                    .enumerate()
                    .map(|(k, &gk)| gk * tw.data()[k / cols])
                    .collect();
                accumulate(&mut grads[*a], d);
            }
            if rg(*b) {
                let d = g
                    .iter()
                    .enumerate()
                    .map(|(k, &gk)| gk * (S::one() - tw.data()[k / cols]))
                    .collect();
                accumulate(&mut grads[*b], d);
            }
        }
        Op::StraightThrough { soft } => accumulate(&mut grads[*soft], g.to_vec()),
    }
}

/// `g[m,n] · b[k,n]^T -> [m,k]`
fn matmul_nt<S: Scalar>(g: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = S::zero();
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            out[i * k + p] = s;
        }
    }
    out
}

/// `a[m,k]^T · g[m,n] -> [k,n]`
fn matmul_tn<S: Scalar>(a: &[S], g: &[S], k: usize, m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    out
}

fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<S> {
        self.graph.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape(*self)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    /// Value of a single-element node.
    pub fn item(&self) -> S {
        self.graph.node(self.id).value.data()[0]
    }

    pub fn grad(&self) -> Option<Tensor<S>> {
        self.graph.grad(*self)
    }

    fn rg_any(&self, others: &[Var<'g, S>]) -> bool {
        self.requires_grad() || others.iter().any(|o| o.requires_grad())
    }

    fn out(&self, value: Tensor<S>, op: Op<S>, rg: bool) -> Var<'g, S> {
        self.graph.push(value, op, rg)
    }

    pub fn add(self, other: Var<'g, S>) -> TensorResult<Var<'g, S>> {
        let v = self.graph.binary("add", self, other, |a, b| a + b)?;
        Ok(self.out(v, Op::Add(self.id, other.id), self.rg_any(&[other])))
    }

    pub fn sub(self, other: Var<'g, S>) -> TensorResult<Var<'g, S>> {
        let v = self.graph.binary("sub", self, other, |a, b| a - b)?;
        Ok(self.out(v, Op::Sub(self.id, other.id), self.rg_any(&[other])))
    }

    pub fn mul(self, other: Var<'g, S>) -> TensorResult<Var<'g, S>> {
        let v = self.graph.binary("mul", self, other, |a, b| a * b)?;
        Ok(self.out(v, Op::Mul(self.id, other.id), self.rg_any(&[other])))
    }

    pub fn add_scalar(self, c: S) -> Var<'g, S> {
        let v = self.graph.unary(self, |a| a + c);
        self.out(v, Op::AddConst(self.id), self.requires_grad())
    }

    pub fn scale(self, c: S) -> Var<'g, S> {
        let v = self.graph.unary(self, |a| a * c);
        self.out(v, Op::Scale(self.id, c), self.requires_grad())
    }

    pub fn neg(self) -> Var<'g, S> {
        self.scale(-S::one())
    }

    pub fn square(self) -> Var<'g, S> {
        self.mul(self).expect("same shape")
    }

    pub fn matmul(self, other: Var<'g, S>) -> TensorResult<Var<'g, S>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = {
            let na = self.graph.node(self.id);
            let nb = self.graph.node(other.id);
            matmul_nn(na.value.data(), nb.value.data(), sa[0], sa[1], sb[1])
        };
        let v = Tensor::new(vec![sa[0], sb[1]], data)?;
        Ok(self.out(v, Op::MatMul(self.id, other.id), self.rg_any(&[other])))
    }

    /// `self[n,d_in] · w[d_in,d_out] + b[d_out]`, bias broadcast over rows.
    pub fn linear(self, w: Var<'g, S>, b: Var<'g, S>) -> TensorResult<Var<'g, S>> {
        let (sx, sw, sb) = (self.shape(), w.shape(), b.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        if sb != [sw[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear(bias)",
                lhs: sw,
                rhs: sb,
            });
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let data = {
            let nx = self.graph.node(self.id);
            let nw = self.graph.node(w.id);
            let nb = self.graph.node(b.id);
            let mut out = matmul_nn(nx.value.data(), nw.value.data(), m, k, n);
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(nb.value.data()).for_each(|(o, &bb)| *o += bb);
            }
            out
        };
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.out(
            v,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            self.rg_any(&[w, b]),
        ))
    }

    /// Valid (unpadded, stride-1) 1-D convolution:
    /// `self[n, c_in, len] ⊛ kernel[c_out, c_in, width] -> [n, c_out, len - width + 1]`.
    pub fn conv1d(self, kernel: Var<'g, S>) -> TensorResult<Var<'g, S>> {
        let (sx, sk) = (self.shape(), kernel.shape());
        if sx.len() != 3 || sk.len() != 3 || sx[1] != sk[1] || sk[2] > sx[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (n, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, kw) = (sk[0], sk[2]);
        let lout = len - kw + 1;
        let data = {
            let nx = self.graph.node(self.id);
            let nk = self.graph.node(kernel.id);
            let (x, k) = (nx.value.data(), nk.value.data());
            let mut out = vec![S::zero(); n * cout * lout];
            for s in 0..n {
                for o in 0..cout {
                    for p in 0..lout {
                        let mut acc = S::zero();
                        for c in 0..cin {
                            for q in 0..kw {
                                acc += x[(s * cin + c) * len + p + q] * k[(o * cin + c) * kw + q];
                            }
                        }
                        out[(s * cout + o) * lout + p] = acc;
                    }
                }
            }
            out
        };
        let v = Tensor::new(vec![n, cout, lout], data)?;
        Ok(self.out(
            v,
            Op::Conv1d {
                x: self.id,
                k: kernel.id,
            },
            self.rg_any(&[kernel]),
        ))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(self) -> Var<'g, S> {
        let v = self.graph.unary(self, |a| a.max(S::zero()));
        self.out(v, Op::Relu(self.id), self.requires_grad())
    }

    pub fn sigmoid(self) -> Var<'g, S> {
        let v = self.graph.unary(self, sigmoid);
        self.out(v, Op::Sigmoid(self.id), self.requires_grad())
    }

    pub fn exp(self) -> Var<'g, S> {
        let v = self.graph.unary(self, |a| a.exp());
        self.out(v, Op::Exp(self.id), self.requires_grad())
    }

    pub fn log(self) -> Var<'g, S> {
        let v = self.graph.unary(self, |a| a.ln());
        self.out(v, Op::Log(self.id), self.requires_grad())
    }

    pub fn abs(self) -> Var<'g, S> {
        let v = self.graph.unary(self, |a| a.abs());
        self.out(v, Op::Abs(self.id), self.requires_grad())
    }

    pub fn softplus(self) -> Var<'g, S> {
        let v = self.graph.unary(self, softplus);
        self.out(v, Op::Softplus(self.id), self.requires_grad())
    }

    pub fn softmax(self, axis: usize) -> TensorResult<Var<'g, S>> {
        let shape = self.graph.check_axis("softmax", self, axis)?;
        let data = softmax_into(self.graph.node(self.id).value.data(), &shape, axis, false);
        let v = Tensor::new(shape, data)?;
        Ok(self.out(
            v,
            Op::Softmax {
                input: self.id,
                axis,
            },
            self.requires_grad(),
        ))
    }

    pub fn log_softmax(self, axis: usize) -> TensorResult<Var<'g, S>> {
        let shape = self.graph.check_axis("log_softmax", self, axis)?;
        let data = softmax_into(self.graph.node(self.id).value.data(), &shape, axis, true);
        let v = Tensor::new(shape, data)?;
        Ok(self.out(
            v,
            Op::LogSoftmax {
                input: self.id,
                axis,
            },
            self.requires_grad(),
        ))
    }

    pub fn sum(self) -> Var<'g, S> {
        let s: S = self.graph.node(self.id).value.data().iter().copied().sum();
        self.out(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'g, S> {
        let (s, n) = {
            let node = self.graph.node(self.id);
            let s: S = node.value.data().iter().copied().sum();
            (s, node.value.numel())
        };
        self.out(
            Tensor::scalar(s / S::lit(n as f64)),
            Op::Mean(self.id),
            self.requires_grad(),
        )
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> TensorResult<Var<'g, S>> {
        let shape = self
            .graph
            .check_axis(if mean { "mean_axis" } else { "sum_axis" }, self, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let data = {
            let node = self.graph.node(self.id);
            let x = node.value.data();
            let mut out = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += x[o * len * inner + j * inner + i];
                    }
                }
            }
            if mean {
                let l = S::lit(len as f64);
                out.iter_mut().for_each(|v| *v /= l);
            }
            out
        };
        let v = Tensor::new(reduced_shape(&shape, axis), data)?;
        let op = if mean {
            Op::MeanAxis {
                input: self.id,
                axis,
            }
        } else {
            Op::SumAxis {
                input: self.id,
                axis,
            }
        };
        Ok(self.out(v, op, self.requires_grad()))
    }

    pub fn sum_axis(self, axis: usize) -> TensorResult<Var<'g, S>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> TensorResult<Var<'g, S>> {
        self.reduce_axis(axis, true)
    }

    /// Picks elements by flat row-major index into a rank-1 result.
    pub fn gather(self, indices: &[usize]) -> TensorResult<Var<'g, S>> {
        if indices.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: "empty index list".into(),
            });
        }
        let data = {
            let node = self.graph.node(self.id);
            let x = node.value.data();
            indices
                .iter()
                .map(|&i| {
                    x.get(i).copied().ok_or(TensorError::IndexOutOfBounds {
                        op: "gather",
                        index: i,
                        len: x.len(),
                    })
                })
                .collect::<TensorResult<Vec<_>>>()?
        };
        let v = Tensor::vector(data)?;
        Ok(self.out(
            v,
            Op::Gather {
                input: self.id,
                indices: indices.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Column `col` of a rank-2 tensor as a rank-1 tensor.
    pub fn column(self, col: usize) -> TensorResult<Var<'g, S>> {
        let shape = self.shape();
        if shape.len() != 2 || col >= shape[1] {
            return Err(TensorError::InvalidArgument {
                op: "column",
                msg: format!("column {col} of shape {shape:?}"),
            });
        }
        let idx: Vec<usize> = (0..shape[0]).map(|r| r * shape[1] + col).collect();
        self.gather(&idx)
    }

    pub fn reshape(self, shape: Vec<usize>) -> TensorResult<Var<'g, S>> {
        let v = self.graph.node(self.id).value.reshape(shape)?;
        Ok(self.out(v, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Constant copy of this node: gradient does not flow back through it.
    pub fn detach(self) -> Var<'g, S> {
        self.graph.constant(self.value())
    }

    /// Per-row blend `w[r]·a[r,:] + (1 − w[r])·b[r,:]`.
    ///
    /// Rows where `w` is exactly 1 (resp. 0) reproduce `a` (resp. `b`)
    /// bit for bit, so a hard 0/1 gate selects a branch exactly.
    pub fn row_blend(w: Var<'g, S>, a: Var<'g, S>, b: Var<'g, S>) -> TensorResult<Var<'g, S>> {
        let (sw, sa, sb) = (w.shape(), a.shape(), b.shape());
        if sa != sb || sa.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row_blend",
                lhs: sa,
                rhs: sb,
            });
        }
        if sw != [sa[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "row_blend(weights)",
                lhs: sw,
                rhs: sa,
            });
        }
        let cols = sa[1];
        let data = {
            let nw = w.graph.node(w.id);
            let na = w.graph.node(a.id);
            let nb = w.graph.node(b.id);
            let (wd, ad, bd) = (nw.value.data(), na.value.data(), nb.value.data());
            (0..ad.len())
                .map(|k| {
                    let wr = wd[k / cols];
                    if wr == S::one() {
                        ad[k]
                    } else if wr == S::zero() {
                        bd[k]
                    } else {
                        wr * ad[k] + (S::one() - wr) * bd[k]
                    }
                })
                .collect()
        };
        let v = Tensor::new(sa, data)?;
        Ok(w.out(
            v,
            Op::RowBlend {
                w: w.id,
                a: a.id,
                b: b.id,
            },
            w.rg_any(&[a, b]),
        ))
    }

    /// Straight-through node: forward value is `hard`, backward gradient
    /// passes to `self` unchanged (`hard + self − stop_gradient(self)`).
    pub fn straight_through(self, hard: Tensor<S>) -> TensorResult<Var<'g, S>> {
        let shape = self.shape();
        if hard.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                lhs: shape,
                rhs: hard.shape().to_vec(),
            });
        }
        Ok(self.out(hard, Op::StraightThrough { soft: self.id }, self.requires_grad()))
    }

    /// Name of the operation that produced this node.
    pub fn op_name(&self) -> &'static str {
        self.graph.node(self.id).op.name()
    }
}
