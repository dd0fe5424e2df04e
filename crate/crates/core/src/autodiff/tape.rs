//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so node indices are already a
//! topological order and the backward sweep is a single reverse scan.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{axis_split, broadcast_shape, gemm, BroadcastMap, Tensor};
use crate::error::{Error, Result};

/// Arguments of `log` are clamped to at least this value.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    SumAxis(usize, usize),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    L2Norm(usize),
    ScaleGrad(usize, f64),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one computation. Single-threaded; build a separate tape per
/// thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar root with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(value), true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(value), false)
    }

    fn push_leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn check(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(v.tape, self) {
            Ok(())
        } else {
            Err(Error::contract("variable belongs to a different tape"))
        }
    }

    /// Gradients of the scalar `root` with respect to all gradient-carrying
    /// leaves. The tape is left untouched, so repeated calls agree exactly.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check(root)?;
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if root_val.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::ones(root_val.shape()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |i: usize, t: Tensor| {
                if nodes[i].requires_grad {
                    match &mut grads[i] {
                        Some(existing) => existing.add_assign(&t),
                        slot => *slot = Some(t),
                    }
                }
            };
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, unbroadcast(&g, val(*a).shape(), |gi, _| gi));
                    acc(*b, unbroadcast(&g, val(*b).shape(), |gi, _| gi));
                }
                Op::Sub(a, b) => {
                    acc(*a, unbroadcast(&g, val(*a).shape(), |gi, _| gi));
                    acc(*b, unbroadcast(&g, val(*b).shape(), |gi, _| -gi));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let mb = BroadcastMap::new(tb.shape(), g.shape());
                    let ma = BroadcastMap::new(ta.shape(), g.shape());
                    acc(
                        *a,
                        unbroadcast(&g, ta.shape(), |gi, i| gi * tb.data()[mb.index(i)]),
                    );
                    acc(
                        *b,
                        unbroadcast(&g, tb.shape(), |gi, i| gi * ta.data()[ma.index(i)]),
                    );
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let mb = BroadcastMap::new(tb.shape(), g.shape());
                    let ma = BroadcastMap::new(ta.shape(), g.shape());
                    acc(
                        *a,
                        unbroadcast(&g, ta.shape(), |gi, i| gi / tb.data()[mb.index(i)]),
                    );
                    acc(
                        *b,
                        unbroadcast(&g, tb.shape(), |gi, i| {
                            let bv = tb.data()[mb.index(i)];
                            -gi * ta.data()[ma.index(i)] / (bv * bv)
                        }),
                    );
                }
                Op::Neg(a) => acc(*a, g.scaled(-1.0)),
                Op::Scale(a, c) | Op::ScaleGrad(a, c) => acc(*a, g.scaled(*c)),
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, g.reshape(shape).expect("reshape of gradient"));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if nodes[*a].requires_grad {
                        let mut ga = Tensor::zeros(vec![m, k]);
                        gemm(m, n, k, g.data(), false, tb.data(), true, ga.data_mut(), false);
                        acc(*a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = Tensor::zeros(vec![k, n]);
                        gemm(k, m, n, ta.data(), true, g.data(), false, gb.data_mut(), false);
                        acc(*b, gb);
                    }
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let mut out = g;
                    out.data_mut()
                        .iter_mut()
                        .zip(x.data())
                        .for_each(|(gi, &xi)| {
                            if xi <= 0.0 {
                                *gi = 0.0
                            }
                        });
                    acc(*a, out);
                }
                Op::Log(a) => {
                    let x = val(*a);
                    let mut out = g;
                    out.data_mut()
                        .iter_mut()
                        .zip(x.data())
                        .for_each(|(gi, &xi)| {
                            *gi = if xi > LOG_FLOOR { *gi / xi } else { 0.0 }
                        });
                    acc(*a, out);
                }
                Op::Exp(a) => {
                    let mut out = g;
                    out.data_mut()
                        .iter_mut()
                        .zip(node.value.data())
                        .for_each(|(gi, &yi)| *gi *= yi);
                    acc(*a, out);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let w = y.last_dim();
                    let mut out = g;
                    for (grow, yrow) in out.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        grow.iter_mut()
                            .zip(yrow)
                            .for_each(|(g, &y)| *g = y * (*g - dot));
                    }
                    acc(*a, out);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let w = y.last_dim();
                    let mut out = g;
                    for (grow, yrow) in out.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                        let total: f64 = grow.iter().sum();
                        grow.iter_mut()
                            .zip(yrow)
                            .for_each(|(g, &y)| *g -= y.exp() * total);
                    }
                    acc(*a, out);
                }
                Op::Sum(a) => {
                    acc(*a, Tensor::full(val(*a).shape(), g.item()));
                }
                Op::SumAxis(a, axis) => {
                    let shape = val(*a).shape().to_vec();
                    let (outer, ext, inner) = axis_split(&shape, *axis);
                    let mut out = Tensor::zeros(shape);
                    let od = out.data_mut();
                    for o in 0..outer {
                        for j in 0..ext {
                            let dst = &mut od[(o * ext + j) * inner..(o * ext + j + 1) * inner];
                            dst.copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    acc(*a, out);
                }
                Op::Concat(inputs, axis) => {
                    let (outer, total, inner) = axis_split(g.shape(), *axis);
                    let mut offset = 0;
                    for &i in inputs {
                        let shape = val(i).shape().to_vec();
                        let ext = shape[*axis];
                        if nodes[i].requires_grad {
                            let mut part = Vec::with_capacity(outer * ext * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                part.extend_from_slice(&g.data()[base..base + ext * inner]);
                            }
                            acc(i, Tensor::new(shape, part).expect("concat split"));
                        }
                        offset += ext;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let shape = val(*input).shape().to_vec();
                    let (outer, ext, inner) = axis_split(&shape, *axis);
                    let width = g.shape()[*axis];
                    let mut out = Tensor::zeros(shape);
                    let od = out.data_mut();
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        let src = o * width * inner;
                        od[dst..dst + width * inner]
                            .copy_from_slice(&g.data()[src..src + width * inner]);
                    }
                    acc(*input, out);
                }
                Op::L2Norm(a) => {
                    let x = val(*a);
                    let norm = node.value.item();
                    let c = if norm > 0.0 { g.item() / norm } else { 0.0 };
                    acc(*a, x.map(|v| v * c));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Sums `f(g[i], i)` back onto a source of shape `src` that was broadcast to `g`.
fn unbroadcast(g: &Tensor, src: &[usize], f: impl Fn(f64, usize) -> f64) -> Tensor {
    let map = BroadcastMap::new(src, g.shape());
    let mut out = Tensor::zeros(src);
    let od = out.data_mut();
    for (i, &gi) in g.data().iter().enumerate() {
        od[map.index(i)] += f(gi, i);
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: Var<'_>) -> Result<()> {
        self.tape.check(other)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let ma = BroadcastMap::new(a.shape(), &shape);
        let mb = BroadcastMap::new(b.shape(), &shape);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| f(a.data()[ma.index(i)], b.data()[mb.index(i)]))
            .collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.push(out, op, &[self.id, other.id]))
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, &[self.id])
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value().map(|x| -x);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| c * x);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(v, Op::Relu(self.id))
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn log(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(LOG_FLOOR).ln());
        self.unary(v, Op::Log(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let w = x.last_dim();
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.unary(out, Op::Softmax(self.id))
    }

    /// `ln softmax(x)` over the last axis, computed as
    /// `x - max - ln Σ exp(x - max)`. Always finite for finite input, and its
    /// gradient does not vanish when a probability underflows.
    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let w = x.last_dim();
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let shift = max + z.ln();
            row.iter_mut().for_each(|v| *v -= shift);
        }
        self.unary(out, Op::LogSoftmax(self.id))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, dropping it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::Shape {
                op: "sum_axis",
                lhs: x.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let (outer, ext, inner) = axis_split(x.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..ext {
                let src = &x.data()[(o * ext + j) * inner..(o * ext + j + 1) * inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        Ok(self.unary(out, Op::SumAxis(self.id, axis)))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let ext = self.shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / ext))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts
            .iter()
            .map(|p| tape.check(*p).map(|_| p.value()))
            .collect::<Result<_>>()?;
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let ext = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Tensor::new(shape, data)?, Op::Concat(ids.clone(), axis), &ids))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() || start >= end || end > x.shape()[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: x.shape().to_vec(),
                rhs: vec![axis, start, end],
            });
        }
        let (outer, ext, inner) = axis_split(x.shape(), axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&x.data()[base..base + width * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = width;
        let out = Tensor::new(shape, data)?;
        Ok(self.unary(
            out,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// Identity forward; no gradient flows back through the result.
    pub fn stop_gradient(self) -> Var<'t> {
        let v = self.value();
        self.tape.push_leaf(v, false)
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().norm());
        self.unary(v, Op::L2Norm(self.id))
    }

    /// Identity forward; backward multiplies the incoming gradient by `c`.
    pub fn scale_grad(self, c: f64) -> Var<'t> {
        let v = self.value();
        let mut nodes = self.tape.nodes.borrow_mut();
        let requires_grad = nodes[self.id].requires_grad;
        nodes.push(Node {
            value: v,
            op: Op::ScaleGrad(self.id, c),
            requires_grad,
        });
        Var {
            tape: self.tape,
            id: nodes.len() - 1,
        }
    }
}
