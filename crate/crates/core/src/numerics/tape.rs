//! Reverse-mode differentiation on an append-only tape.
//!
//! Backward rules are themselves written in terms of tape operations, so the
//! result of [`Tape::grad`] is a set of ordinary nodes that can be
//! differentiated again. That is what lets the distillation loss
//! `||grad_theta L(theta; S) - G||^2` be differentiated with respect to `S`.
//!
//! Node ids increase in creation order and every op only references older
//! nodes, so the tape is acyclic by construction. All reductions run
//! left to right in index order.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Index value used by [`Tape::gather`] to emit a zero.
pub const PAD: usize = usize::MAX;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn id(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Expand(usize),
    RowSum(usize),
    BroadcastCols(usize),
    ColSum(usize),
    BroadcastRows(usize),
    Square(usize),
    Sqrt(usize),
    Recip(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softmax(usize),
    SoftmaxXent(usize, Arc<[usize]>),
    Gather(usize, Arc<[usize]>),
    ScatterAdd(usize, Arc<[usize]>),
    Reshape(usize),
    Concat(Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Single-threaded differentiation tape. Distinct tapes share nothing.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = libm::exp(z - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id() >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.id())
    }

    fn handle(&self, idx: usize) -> Var {
        Var {
            tape: self.id,
            idx: idx as u32,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.handle(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        check_finite(value.data(), name)?;
        let rg = self.op_requires_grad(&op);
        Ok(self.push(op, value, rg))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |i: &usize| self.nodes[*i].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => rg(a) || rg(b),
            Op::Affine(a, ..)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::RowSum(a)
            | Op::BroadcastCols(a)
            | Op::ColSum(a)
            | Op::BroadcastRows(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::SoftmaxXent(a, _)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _)
            | Op::Reshape(a) => rg(a),
            Op::Concat(parts) => parts.iter().any(rg),
        }
    }

    /// Differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Input that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.index(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push_checked(op(ia, ib), value, name)
    }

    fn unary(
        &mut self,
        a: Var,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: fn(usize) -> Op,
    ) -> Result<Var> {
        let ia = self.index(a)?;
        let ta = self.val(ia);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push_checked(op(ia), value, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let ta = self.val(ia);
        let data = ta.data().iter().map(|&x| scale * x + shift).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push_checked(Op::Affine(ia, scale), value, "affine")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.affine(a, k, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::from_parts(vec![m, n], out);
        self.push_checked(Op::MatMul(ia, ib), value, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let ta = self.val(ia);
        if ta.shape().len() != 2 {
            return Err(Error::shape("transpose", ta.shape(), &[]));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let d = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let value = Tensor::from_parts(vec![n, m], out);
        self.push_checked(Op::Transpose(ia), value, "transpose")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let s = self.val(ia).data().iter().fold(0.0, |acc, v| acc + v);
        self.push_checked(Op::Sum(ia), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a)?.len();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let v = self.val(ia).item()?;
        self.push_checked(Op::Expand(ia), Tensor::filled(shape, v), "expand")
    }

    fn as_matrix(&self, i: usize, name: &'static str) -> Result<(usize, usize)> {
        let t = self.val(i);
        if t.shape().len() != 2 {
            return Err(Error::shape(name, t.shape(), &[]));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `[n, k] -> [n]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let (n, k) = self.as_matrix(ia, "row_sum")?;
        let d = self.val(ia).data();
        let out = (0..n)
            .map(|i| d[i * k..(i + 1) * k].iter().fold(0.0, |acc, v| acc + v))
            .collect();
        self.push_checked(Op::RowSum(ia), Tensor::from_parts(vec![n], out), "row_sum")
    }

    /// `[n] -> [n, k]`, repeating each entry along its row.
    pub fn broadcast_cols(&mut self, a: Var, k: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        if t.shape().len() != 1 {
            return Err(Error::shape("broadcast_cols", t.shape(), &[]));
        }
        let n = t.len();
        let mut out = Vec::with_capacity(n * k);
        for &v in t.data() {
            out.extend(core::iter::repeat_n(v, k));
        }
        let value = Tensor::from_parts(vec![n, k], out);
        self.push_checked(Op::BroadcastCols(ia), value, "broadcast_cols")
    }

    /// `[n, k] -> [k]`.
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let (n, k) = self.as_matrix(ia, "col_sum")?;
        let d = self.val(ia).data();
        let mut out = vec![0.0; k];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(&d[i * k..(i + 1) * k]) {
                *o += v;
            }
        }
        self.push_checked(Op::ColSum(ia), Tensor::from_parts(vec![k], out), "col_sum")
    }

    /// `[k] -> [n, k]`, stacking the vector `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        if t.shape().len() != 1 {
            return Err(Error::shape("broadcast_rows", t.shape(), &[]));
        }
        let k = t.len();
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let value = Tensor::from_parts(vec![n, k], out);
        self.push_checked(Op::BroadcastRows(ia), value, "broadcast_rows")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "square", |x| x * x, Op::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a)?.data().iter().any(|&x| x < 0.0) {
            return Err(Error::NonFinite("sqrt"));
        }
        self.unary(a, "sqrt", libm::sqrt, Op::Sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "recip", |x| 1.0 / x, Op::Recip)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", libm::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    /// Row-wise softmax of an `[n, k]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let (n, k) = self.as_matrix(ia, "softmax")?;
        let d = self.val(ia).data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            softmax_row(&d[i * k..(i + 1) * k], &mut out[i * k..(i + 1) * k]);
        }
        self.push_checked(Op::Softmax(ia), Tensor::from_parts(vec![n, k], out), "softmax")
    }

    /// Mean softmax cross-entropy of `[n, C]` logits against hard labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ia = self.index(logits)?;
        let (n, k) = self.as_matrix(ia, "softmax_xent")?;
        if n != labels.len() {
            return Err(Error::shape("softmax_xent", &[n, k], &[labels.len()]));
        }
        if n == 0 {
            return Err(Error::Empty("softmax_xent"));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let d = self.val(ia).data();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &d[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let se = row.iter().fold(0.0, |acc, &z| acc + libm::exp(z - max));
            total += max + libm::log(se) - row[y];
        }
        let value = Tensor::scalar(total / n as f64);
        self.push_checked(Op::SoftmaxXent(ia, labels.into()), value, "softmax_xent")
    }

    /// `out[j] = a.flat[idx[j]]`, or zero where `idx[j] == PAD`.
    pub fn gather(&mut self, a: Var, idx: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        if numel(shape) != idx.len() {
            return Err(Error::shape("gather", shape, &[idx.len()]));
        }
        if idx.iter().any(|&i| i != PAD && i >= t.len()) {
            return Err(Error::shape("gather", t.shape(), shape));
        }
        let d = t.data();
        let out = idx.iter().map(|&i| if i == PAD { 0.0 } else { d[i] }).collect();
        let value = Tensor::from_parts(shape.to_vec(), out);
        self.push_checked(Op::Gather(ia, idx), value, "gather")
    }

    /// Adjoint of [`gather`](Self::gather): `out.flat[idx[j]] += a.flat[j]`.
    pub fn scatter_add(&mut self, a: Var, idx: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        if t.len() != idx.len() {
            return Err(Error::shape("scatter_add", t.shape(), &[idx.len()]));
        }
        let len = numel(shape);
        if idx.iter().any(|&i| i != PAD && i >= len) {
            return Err(Error::shape("scatter_add", t.shape(), shape));
        }
        let mut out = vec![0.0; len];
        for (&i, &v) in idx.iter().zip(t.data()) {
            if i != PAD {
                out[i] += v;
            }
        }
        let value = Tensor::from_parts(shape.to_vec(), out);
        self.push_checked(Op::ScatterAdd(ia, idx), value, "scatter_add")
    }

    /// Rows of a 2-D tensor, in the given order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let (_, k) = self.as_matrix(ia, "select_rows")?;
        let idx: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (r * k)..(r * k + k))
            .collect();
        self.gather(a, idx.into(), &[rows.len(), k])
    }

    /// Contiguous flat range `[offset, offset + numel(shape))`.
    pub fn slice(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let idx: Vec<usize> = (offset..offset + numel(shape)).collect();
        self.gather(a, idx.into(), shape)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let value = self.val(ia).reshaped(shape.to_vec())?;
        self.push_checked(Op::Reshape(ia), value, "reshape")
    }

    /// Flattens and joins the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.index(p))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for &i in &idx {
            out.extend_from_slice(self.val(i).data());
        }
        let n = out.len();
        self.push_checked(Op::Concat(idx), Tensor::from_parts(vec![n], out), "concat")
    }

    /// Derivatives of the scalar `loss` with respect to each of `wrt`.
    ///
    /// The returned nodes live on this tape and can be differentiated
    /// again. Inputs that `loss` does not depend on get a zero constant.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let il = self.index(loss)?;
        let wrt_idx = wrt
            .iter()
            .map(|&w| self.index(w))
            .collect::<Result<Vec<_>>>()?;
        if !self.val(il).is_scalar() {
            return Err(Error::NotScalar(self.val(il).shape().to_vec()));
        }
        let mut adj: Vec<Option<usize>> = vec![None; il + 1];
        let seed = Tensor::filled(self.val(il).shape(), 1.0);
        adj[il] = Some(self.constant(seed).id());
        for i in (0..=il).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, contrib) in self.vjp(i, &op, g)? {
                adj[parent] = Some(match adj[parent] {
                    None => contrib,
                    Some(prev) => {
                        let (pv, cv) = (self.handle(prev), self.handle(contrib));
                        self.add(pv, cv)?.id()
                    }
                });
            }
        }
        wrt_idx
            .into_iter()
            .map(|w| match adj.get(w).copied().flatten() {
                Some(g) => Ok(self.handle(g)),
                None => {
                    let z = Tensor::zeros(self.val(w).shape());
                    Ok(self.constant(z))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products for node `i` given its adjoint `g`.
    fn vjp(&mut self, i: usize, op: &Op, g: usize) -> Result<Vec<(usize, usize)>> {
        let h = |t: &Self, x: usize| t.handle(x);
        let gv = h(self, g);
        let out = h(self, i);
        let needs = |t: &Self, p: usize| t.nodes[p].requires_grad;
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(self, a) {
                    res.push((a, g));
                }
                if needs(self, b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if needs(self, a) {
                    res.push((a, g));
                }
                if needs(self, b) {
                    res.push((b, self.scale(gv, -1.0)?.id()));
                }
            }
            Op::Mul(a, b) => {
                if needs(self, a) {
                    res.push((a, self.mul(gv, h(self, b))?.id()));
                }
                if needs(self, b) {
                    res.push((b, self.mul(gv, h(self, a))?.id()));
                }
            }
            Op::Affine(a, scale) => {
                res.push((a, self.scale(gv, scale)?.id()));
            }
            Op::MatMul(a, b) => {
                if needs(self, a) {
                    let bt = self.transpose(h(self, b))?;
                    res.push((a, self.matmul(gv, bt)?.id()));
                }
                if needs(self, b) {
                    let at = self.transpose(h(self, a))?;
                    res.push((b, self.matmul(at, gv)?.id()));
                }
            }
            Op::Transpose(a) => res.push((a, self.transpose(gv)?.id())),
            Op::Sum(a) => {
                let shape = self.val(a).shape().to_vec();
                res.push((a, self.expand(gv, &shape)?.id()));
            }
            Op::Expand(a) => {
                let s = self.sum(gv)?;
                let shape = self.val(a).shape().to_vec();
                res.push((a, self.reshape(s, &shape)?.id()));
            }
            Op::RowSum(a) => {
                let k = self.val(a).shape()[1];
                res.push((a, self.broadcast_cols(gv, k)?.id()));
            }
            Op::BroadcastCols(a) => res.push((a, self.row_sum(gv)?.id())),
            Op::ColSum(a) => {
                let n = self.val(a).shape()[0];
                res.push((a, self.broadcast_rows(gv, n)?.id()));
            }
            Op::BroadcastRows(a) => res.push((a, self.col_sum(gv)?.id())),
            Op::Square(a) => {
                let two_a = self.scale(h(self, a), 2.0)?;
                res.push((a, self.mul(gv, two_a)?.id()));
            }
            Op::Sqrt(a) => {
                let r = self.recip(out)?;
                let half_r = self.scale(r, 0.5)?;
                res.push((a, self.mul(gv, half_r)?.id()));
            }
            Op::Recip(a) => {
                let sq = self.square(out)?;
                let m = self.mul(gv, sq)?;
                res.push((a, self.scale(m, -1.0)?.id()));
            }
            Op::Sigmoid(a) => {
                let one_minus = self.affine(out, -1.0, 1.0)?;
                let d = self.mul(out, one_minus)?;
                res.push((a, self.mul(gv, d)?.id()));
            }
            Op::Tanh(a) => {
                let sq = self.square(out)?;
                let d = self.affine(sq, -1.0, 1.0)?;
                res.push((a, self.mul(gv, d)?.id()));
            }
            Op::Relu(a) => {
                let mask: Vec<f64> = self
                    .val(a)
                    .data()
                    .iter()
                    .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                let shape = self.val(a).shape().to_vec();
                let m = self.constant(Tensor::from_parts(shape, mask));
                res.push((a, self.mul(gv, m)?.id()));
            }
            Op::Softmax(a) => {
                let k = self.val(a).shape()[1];
                let go = self.mul(gv, out)?;
                let rs = self.row_sum(go)?;
                let bc = self.broadcast_cols(rs, k)?;
                let centered = self.sub(gv, bc)?;
                res.push((a, self.mul(out, centered)?.id()));
            }
            Op::SoftmaxXent(a, ref labels) => {
                let (n, k) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                let mut onehot = vec![0.0; n * k];
                for (r, &y) in labels.iter().enumerate() {
                    onehot[r * k + y] = 1.0;
                }
                let onehot = self.constant(Tensor::from_parts(vec![n, k], onehot));
                let p = self.softmax(h(self, a))?;
                let diff = self.sub(p, onehot)?;
                let scaled = self.scale(diff, 1.0 / n as f64)?;
                let gexp = self.expand(gv, &[n, k])?;
                res.push((a, self.mul(gexp, scaled)?.id()));
            }
            Op::Gather(a, ref idx) => {
                let shape = self.val(a).shape().to_vec();
                res.push((a, self.scatter_add(gv, idx.clone(), &shape)?.id()));
            }
            Op::ScatterAdd(a, ref idx) => {
                let shape = self.val(a).shape().to_vec();
                res.push((a, self.gather(gv, idx.clone(), &shape)?.id()));
            }
            Op::Reshape(a) => {
                let shape = self.val(a).shape().to_vec();
                res.push((a, self.reshape(gv, &shape)?.id()));
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.val(p).shape().to_vec();
                    let len = numel(&shape);
                    if needs(self, p) {
                        res.push((p, self.slice(gv, offset, &shape)?.id()));
                    }
                    offset += len;
                }
            }
        }
        Ok(res)
    }
}
