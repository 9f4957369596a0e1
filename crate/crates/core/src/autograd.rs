//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in execution order; [`Var`] is a cheap
//! copyable handle to one recorded value. [`Tape::backward`] walks the tape in
//! reverse exactly once and leaves `dLoss/dVar` readable through [`Var::grad`].

use std::cell::{Cell, Ref, RefCell};

use crate::error::{contract, shape_err, Error, Result};
use crate::kernels::{self, AttnDims, AttnLayout};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sigmoid(usize),
    Relu(usize),
    Transpose(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<T>,
        count: usize,
        smoothing: T,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        layout: AttnLayout,
        heads: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } => vec![*input],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of operations. Single-threaded; distinct tapes are independent.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
    done: Cell<bool>,
    relu_margin: Cell<f64>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            done: Cell::new(false),
            relu_margin: Cell::new(f64::INFINITY),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_op(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, rg)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn param(&self, id: ParamId, value: Tensor<T>, track: bool) -> Var<'_, T> {
        if track {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    /// Smallest |input| seen by any relu so far. Finite-difference oracles use
    /// it to reject points that sit next to a kink.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin.get()
    }

    /// Clear gradients so `backward` may run again.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
        self.done.set(false);
    }

    /// Cached attention probabilities of an attention node, laid out per
    /// segment as `[head][query][key]` blocks.
    pub fn attention_probs(&self, var: Var<'_, T>) -> Option<Vec<T>> {
        match &self.nodes.borrow()[var.id].op {
            Op::Attention { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(contract("loss belongs to a different tape"));
        }
        if self.done.get() {
            return Err(contract("backward called twice without zero_grad"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.done.set(true);
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            *self.grads.borrow_mut() = grads;
            return Ok(());
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                backprop_node(&nodes, id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Add the gradients of every parameter bound on this tape into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let grads = self.grads.borrow();
        for (node, g) in nodes.iter().zip(grads.iter()) {
            if let (Op::Param(pid), Some(g)) = (&node.op, g) {
                store.add_grad(*pid, g)?;
            }
        }
        Ok(())
    }

    fn check<'a>(&'a self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, other.tape) {
            Ok(())
        } else {
            Err(contract("operands recorded on different tapes"))
        }
    }
}

fn accumulate<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let g = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    f(g.data_mut());
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Outer/axis/inner decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn backprop_node<T: Element>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let gd = g.data();
    let node = &nodes[id];
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = av.dims2()?;
            let (_, n) = bv.dims2()?;
            if nodes[*a].requires_grad {
                let bt = kernels::transpose(bv.data(), k, n);
                let mut da = vec![T::zero(); m * k];
                kernels::matmul_into(gd, &bt, m, n, k, &mut da);
                accumulate(nodes, grads, *a, |d| add_into(d, &da));
            }
            if nodes[*b].requires_grad {
                let at = kernels::transpose(av.data(), m, k);
                let mut db = vec![T::zero(); k * n];
                kernels::matmul_into(&at, gd, k, m, n, &mut db);
                accumulate(nodes, grads, *b, |d| add_into(d, &db));
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, gd));
            accumulate(nodes, grads, *b, |d| add_into(d, gd));
        }
        Op::AddRow(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, gd));
            let width = nodes[*b].value.numel();
            accumulate(nodes, grads, *b, |d| {
                for row in gd.chunks_exact(width) {
                    add_into(d, row);
                }
            });
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, gd));
            accumulate(nodes, grads, *b, |d| {
                d.iter_mut().zip(gd).for_each(|(d, &s)| *d -= s)
            });
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(nodes, grads, *a, |d| {
                for ((d, &s), &y) in d.iter_mut().zip(gd).zip(bv) {
                    *d += s * y;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((d, &s), &x) in d.iter_mut().zip(gd).zip(av) {
                    *d += s * x;
                }
            });
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, grads, *a, |d| {
                d.iter_mut().zip(gd).for_each(|(d, &s)| *d += c * s)
            });
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, |d| {
                for ((d, &s), &y) in d.iter_mut().zip(gd).zip(y) {
                    *d += s * y * (T::one() - y);
                }
            });
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |d| {
                for ((d, &s), &x) in d.iter_mut().zip(gd).zip(x) {
                    if x > T::zero() {
                        *d += s;
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (m, n) = node.value.dims2()?;
            let t = kernels::transpose(gd, m, n);
            accumulate(nodes, grads, *a, |d| add_into(d, &t));
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = split_axis(node.value.shape(), *axis);
            let total = node.value.shape()[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let width = nodes[inp].value.shape()[*axis] * inner;
                accumulate(nodes, grads, inp, |d| {
                    for o in 0..outer {
                        add_into(
                            &mut d[o * width..(o + 1) * width],
                            &gd[o * total + offset..][..width],
                        );
                    }
                });
                offset += width;
            }
        }
        Op::Slice { input, axis, start } => {
            let src_shape = nodes[*input].value.shape();
            let (outer, full, inner) = split_axis(src_shape, *axis);
            let len = node.value.shape()[*axis];
            let (start, width, total) = (*start * inner, len * inner, full * inner);
            accumulate(nodes, grads, *input, |d| {
                for o in 0..outer {
                    add_into(
                        &mut d[o * total + start..][..width],
                        &gd[o * width..(o + 1) * width],
                    );
                }
            });
        }
        Op::Sum(a) => {
            let s = gd[0];
            accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += s));
        }
        Op::Mean(a) => {
            let s = gd[0] / T::of(nodes[*a].value.numel() as f64);
            accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += s));
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let n = node.value.last_dim();
            accumulate(nodes, grads, *a, |d| {
                for ((d, g), y) in d
                    .chunks_exact_mut(n)
                    .zip(gd.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += y * (g - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gam = nodes[*gamma].value.data();
            let dim = gam.len();
            let dimf = T::of(dim as f64);
            accumulate(nodes, grads, *x, |d| {
                let mut dxhat = vec![T::zero(); dim];
                for (r, (d, g)) in d
                    .chunks_exact_mut(dim)
                    .zip(gd.chunks_exact(dim))
                    .enumerate()
                {
                    let xh = &xhat[r * dim..(r + 1) * dim];
                    for ((dx, &g), &gm) in dxhat.iter_mut().zip(g).zip(gam) {
                        *dx = g * gm;
                    }
                    let sum_dx: T = dxhat.iter().copied().sum();
                    let sum_dx_xh: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    let scale = inv_std[r] / dimf;
                    for ((d, &dx), &xh) in d.iter_mut().zip(&dxhat).zip(xh) {
                        *d += scale * (dimf * dx - sum_dx - xh * sum_dx_xh);
                    }
                }
            });
            accumulate(nodes, grads, *gamma, |d| {
                for (g, xh) in gd.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                    for ((d, &g), &xh) in d.iter_mut().zip(g).zip(xh) {
                        *d += g * xh;
                    }
                }
            });
            accumulate(nodes, grads, *beta, |d| {
                for g in gd.chunks_exact(dim) {
                    add_into(d, g);
                }
            });
        }
        Op::Gather { table, ids } => {
            let dim = nodes[*table].value.last_dim();
            accumulate(nodes, grads, *table, |d| {
                for (r, &idx) in ids.iter().enumerate() {
                    add_into(
                        &mut d[idx * dim..(idx + 1) * dim],
                        &gd[r * dim..(r + 1) * dim],
                    );
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            pad,
            probs,
            count,
            smoothing,
        } => {
            let v = nodes[*logits].value.last_dim();
            let s = gd[0] / T::of(*count as f64);
            let eps = *smoothing;
            let uniform = eps / T::of(v as f64);
            accumulate(nodes, grads, *logits, |d| {
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    let p = &probs[r * v..(r + 1) * v];
                    let row = &mut d[r * v..(r + 1) * v];
                    for (j, (d, &p)) in row.iter_mut().zip(p).enumerate() {
                        let q = if j == t {
                            T::one() - eps + uniform
                        } else {
                            uniform
                        };
                        *d += s * (p - q);
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            heads,
            probs,
        } => {
            let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
            let dims = AttnDims {
                heads: *heads,
                dq: qv.last_dim(),
                dv: vv.last_dim(),
            };
            let mut dq = vec![T::zero(); qv.numel()];
            let mut dk = vec![T::zero(); kv.numel()];
            let mut dv = vec![T::zero(); vv.numel()];
            kernels::attention_backward(
                qv.data(),
                kv.data(),
                vv.data(),
                probs,
                gd,
                &dims,
                layout,
                (&mut dq, &mut dk, &mut dv),
            );
            accumulate(nodes, grads, *q, |d| add_into(d, &dq));
            accumulate(nodes, grads, *k, |d| add_into(d, &dk));
            accumulate(nodes, grads, *v, |d| add_into(d, &dv));
        }
    }
    Ok(())
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    /// Borrow the recorded value.
    pub fn value_ref(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.node(), |n| &n.value)
    }

    pub fn value(&self) -> Tensor<T> {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    /// Gradient after `backward`; `None` for values the loss does not reach.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grads.borrow().get(self.id).and_then(Clone::clone)
    }

    fn binary_same_shape(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.tape.check(&other)?;
        let value = {
            let a = self.value_ref();
            let b = other.value_ref();
            if a.shape() != b.shape() {
                return Err(shape_err(name, a.shape(), b.shape()));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.push_op(value, op))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same_shape(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same_shape(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same_shape(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Add a `[d]` vector to every row of a `[..., d]` tensor.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check(&bias)?;
        let value = {
            let a = self.value_ref();
            let b = bias.value_ref();
            if b.rank() != 1 || a.last_dim() != b.numel() {
                return Err(shape_err("add_row", a.shape(), b.shape()));
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_exact_mut(b.numel()) {
                add_into(row, b.data());
            }
            out
        };
        Ok(self.tape.push_op(value, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let value = self.value_ref().map(|x| x * c);
        self.tape.push_op(value, Op::Scale(self.id, c))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let value = self.value_ref().map(|x| T::one() / (T::one() + (-x).exp()));
        self.tape.push_op(value, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t, T> {
        let value = {
            let v = self.value_ref();
            let margin = v
                .data()
                .iter()
                .map(|x| x.as_f64().abs())
                .fold(f64::INFINITY, f64::min);
            self.tape
                .relu_margin
                .set(self.tape.relu_margin.get().min(margin));
            v.map(|x| x.max(T::zero()))
        };
        self.tape.push_op(value, Op::Relu(self.id))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check(&other)?;
        let value = self.value_ref().matmul(&other.value_ref())?;
        Ok(self.tape.push_op(value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let value = self.value_ref().transpose()?;
        Ok(self.tape.push_op(value, Op::Transpose(self.id)))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = *parts
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let tape = first.tape;
        let value = {
            let vals: Vec<Ref<'_, Tensor<T>>> = parts.iter().map(|p| p.value_ref()).collect();
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(shape_err("concat axis", &base, &[axis]));
            }
            let mut shape = base.clone();
            shape[axis] = 0;
            for (p, v) in parts.iter().zip(&vals) {
                tape.check(p)?;
                let s = v.shape();
                if s.len() != base.len()
                    || s.iter()
                        .enumerate()
                        .any(|(i, &d)| i != axis && d != base[i])
                {
                    return Err(shape_err("concat", &base, s));
                }
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in &vals {
                    let w = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
                }
            }
            Tensor::new(shape, data)?
        };
        let inputs = parts.iter().map(|p| p.id).collect();
        Ok(tape.push_op(value, Op::Concat { inputs, axis }))
    }

    /// Copying slice `start..start+len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let value = {
            let v = self.value_ref();
            let shape = v.shape();
            if axis >= shape.len() || len == 0 || start + len > shape[axis] {
                return Err(shape_err("slice", shape, &[axis, start, len]));
            }
            let (outer, full, inner) = split_axis(shape, axis);
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&v.data()[(o * full + start) * inner..][..len * inner]);
            }
            Tensor::new(out_shape, data)?
        };
        Ok(self.tape.push_op(
            value,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s: T = self.value_ref().data().iter().copied().sum();
        self.tape.push_op(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let v = self.value_ref();
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        drop(v);
        self.tape.push_op(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Row-wise softmax over the last axis, stabilised by the row max.
    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        self.softmax_rows_masked(None)
    }

    /// Row-wise softmax where `mask[i] == false` excludes an entry: it gets
    /// probability exactly 0. Every row needs at least one permitted entry.
    pub fn softmax_rows_masked(self, mask: Option<&[bool]>) -> Result<Var<'t, T>> {
        let value = {
            let v = self.value_ref();
            let n = v.last_dim();
            if let Some(m) = mask {
                if m.len() != v.numel() {
                    return Err(shape_err("softmax mask", v.shape(), &[m.len()]));
                }
            }
            let mut out = v.clone();
            for (r, row) in out.data_mut().chunks_exact_mut(n).enumerate() {
                let allowed = |j: usize| mask.is_none_or(|m| m[r * n + j]);
                let max = (0..n)
                    .filter(|&j| allowed(j))
                    .map(|j| row[j])
                    .fold(T::neg_infinity(), T::max);
                if max == T::neg_infinity() {
                    return Err(contract(format!("softmax row {r} is fully masked")));
                }
                let mut total = T::zero();
                for (j, x) in row.iter_mut().enumerate() {
                    *x = if allowed(j) {
                        (*x - max).exp()
                    } else {
                        T::zero()
                    };
                    total += *x;
                }
                row.iter_mut().for_each(|x| *x = *x / total);
            }
            out
        };
        Ok(self.tape.push_op(value, Op::Softmax(self.id)))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of width `d`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check(&gamma)?;
        self.tape.check(&beta)?;
        let (value, xhat, inv_std) = {
            let x = self.value_ref();
            let g = gamma.value_ref();
            let b = beta.value_ref();
            let d = x.last_dim();
            if g.shape() != [d] || b.shape() != [d] {
                return Err(shape_err("layer_norm", x.shape(), g.shape()));
            }
            let rows = x.numel() / d;
            let eps = T::of(LAYER_NORM_EPS);
            let mut xhat = Vec::with_capacity(x.numel());
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks_exact(d) {
                let mean = row.iter().copied().sum::<T>() / T::of(d as f64);
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(d as f64);
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                for ((&v, &gm), &bt) in row.iter().zip(g.data()).zip(b.data()) {
                    let xh = (v - mean) * is;
                    xhat.push(xh);
                    out.push(gm * xh + bt);
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        Ok(self.tape.push_op(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Rows `table[ids[i]]` of a `[V×d]` table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let t = self.value_ref();
            let (v, d) = t.dims2()?;
            if ids.is_empty() {
                return Err(contract("gather of zero rows"));
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                if i >= v {
                    return Err(Error::Index {
                        what: "row",
                        index: i,
                        bound: v,
                    });
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        Ok(self.tape.push_op(
            value,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over non-pad rows of `-log softmax(logits)[target]`, optionally
    /// label-smoothed with mass `smoothing` spread uniformly.
    pub fn cross_entropy(
        self,
        targets: &[usize],
        pad: usize,
        smoothing: f64,
    ) -> Result<Var<'t, T>> {
        let (loss, probs, count) = {
            let l = self.value_ref();
            let (n, v) = l.dims2()?;
            if targets.len() != n {
                return Err(shape_err("cross_entropy", l.shape(), &[targets.len()]));
            }
            let eps = T::of(smoothing);
            let mut probs = vec![T::zero(); n * v];
            let mut total = T::zero();
            let mut count = 0usize;
            for (r, &t) in targets.iter().enumerate() {
                let row = l.row(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
                for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                    *p = (x - lse).exp();
                }
                if t == pad {
                    continue;
                }
                if t >= v {
                    return Err(Error::Index {
                        what: "target",
                        index: t,
                        bound: v,
                    });
                }
                let nll = lse - row[t];
                let smooth = if smoothing > 0.0 {
                    lse - row.iter().copied().sum::<T>() / T::of(v as f64)
                } else {
                    T::zero()
                };
                total += (T::one() - eps) * nll + eps * smooth;
                count += 1;
            }
            if count == 0 {
                return Err(contract("cross entropy over an all-pad batch"));
            }
            (total / T::of(count as f64), probs, count)
        };
        Ok(self.tape.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
                smoothing: T::of(smoothing),
            },
        ))
    }

    /// Fused packed multi-head scaled dot-product attention.
    pub fn attention(
        self,
        k: Var<'t, T>,
        v: Var<'t, T>,
        heads: usize,
        layout: &AttnLayout,
    ) -> Result<Var<'t, T>> {
        self.tape.check(&k)?;
        self.tape.check(&v)?;
        let (value, probs) = {
            let (qv, kv, vv) = (self.value_ref(), k.value_ref(), v.value_ref());
            let (nq, dq) = qv.dims2()?;
            let (nk, dk) = kv.dims2()?;
            let (nv, dv) = vv.dims2()?;
            if dq != dk || nk != nv {
                return Err(shape_err("attention", qv.shape(), kv.shape()));
            }
            if heads == 0 || dq % heads != 0 || dv % heads != 0 {
                return Err(shape_err("attention heads", &[dq, dv], &[heads]));
            }
            if layout.q_rows() > nq || layout.k_rows() > nk {
                return Err(shape_err(
                    "attention layout",
                    &[nq, nk],
                    &[layout.q_rows(), layout.k_rows()],
                ));
            }
            if layout
                .segments
                .iter()
                .any(|s| s.q_len == 0 || s.k_len == 0 || (layout.causal && s.q_len > s.k_len))
            {
                return Err(contract("attention segment without visible keys"));
            }
            let dims = AttnDims { heads, dq, dv };
            let (out, probs) =
                kernels::attention_forward(qv.data(), kv.data(), vv.data(), &dims, layout);
            (Tensor::new(vec![nq, dv], out)?, probs)
        };
        Ok(self.tape.push_op(
            value,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                layout: layout.clone(),
                heads,
                probs,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_two_x() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[1.]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
        tape.zero_grad();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn detached_loss_is_noop() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1., 2.]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f32>::new();
        let c = 3.7f64;
        let x = tape.constant(
            Tensor::new(vec![2, 2], vec![0.0, 0.0, c as f32, (c + 2f64.ln()) as f32]).unwrap(),
        );
        let y = x.softmax_rows().unwrap().value();
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert!((y.at(1, 0) as f64 - 1.0 / 3.0).abs() < 1e-6);
        assert!((y.at(1, 1) as f64 - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(x.softmax_rows_masked(Some(&[false, false])).is_err());
        let y = x.softmax_rows_masked(Some(&[true, false])).unwrap().value();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f32>::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::full(&[1, 3], 5.0));
        assert_eq!(x.layer_norm(g, b).unwrap().value().data(), &[0.0; 3]);
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let y = x.layer_norm(g, b).unwrap().value();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t(&[2, 1], &[5., 6.]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1., 2., 5., 3., 4., 6.]);
        let s = c.slice(1, 2, 1).unwrap();
        assert_eq!(s.value().data(), &[5., 6.]);
        let rows = Var::concat(&[a, a], 0).unwrap();
        assert_eq!(rows.shape(), vec![4, 2]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let tape = Tape::<f32>::new();
        let table = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(table.gather_rows(&[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn uniform_cross_entropy_is_ln_v() {
        let tape = Tape::<f32>::new();
        let logits = tape.leaf(Tensor::zeros(&[3, 8]));
        let loss = logits.cross_entropy(&[4, 2, 5], 2, 0.0).unwrap();
        assert!((loss.value().item().unwrap() as f64 - 8f64.ln()).abs() < 1e-6);
        assert!(logits.cross_entropy(&[2, 2, 2], 2, 0.0).is_err());
    }
}
