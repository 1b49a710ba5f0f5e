//! Recorded computation graph with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] walks it once, back to front.
//! Every op checks shapes and refuses to produce non-finite values.
//!
//! Broadcasting is limited to a shared leading batch: `matmul` accepts a 2-D
//! right operand against a batched left operand, `add_bias` adds a vector
//! along the last axis and `masked_fill` repeats its mask over leading axes.

use std::rc::Rc;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Embedding(Var, Vec<usize>),
    MaskedFill(Var, Rc<Vec<bool>>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like `like` when no path reached it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// A single-threaded tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[perm-index] = x[index]` for a general axis permutation.
fn permute_data(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    // Stride in the input for each output axis.
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let data = x.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves size")
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Swaps the last two axes.
fn transpose_data(x: &Tensor) -> Tensor {
    let r = x.shape().len();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    permute_data(x, &perm)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, value, op, rg)
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(a);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map("softplus", a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, Op::Square(a), |x| x * x)
    }

    /// `x[..., n] + b[n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(b) != [n] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let vx = self.value(x);
        let vb = self.value(b).data();
        let data = vx.data().chunks(n).flat_map(|row| row.iter().zip(vb).map(|(a, c)| a + c)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        self.push("add_bias", value, Op::AddBias(x, b), rg)
    }

    /// `[.., m, k] × [k, n]` (shared right operand) or `[B.., m, k] × [B.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(bad());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared = sb.len() == 2;
        if !shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(bad());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if shared {
            gemm_nn(va, vb, &mut out, batch * m, k, n);
        } else {
            for i in 0..batch {
                gemm_nn(
                    &va[i * m * k..(i + 1) * m * k],
                    &vb[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(a))));
        }
        let value = transpose_data(self.value(a));
        let rg = self.rg(a);
        self.push("transpose", value, Op::Transpose(a), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let r = self.shape(a).len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} on rank {r}")));
        }
        let value = permute_data(self.value(a), perm);
        let rg = self.rg(a);
        self.push("permute", value, Op::Permute(a, perm.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat", Tensor::new(out_shape, out)?, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        self.push("slice", Tensor::new(out_shape, out)?, Op::Slice(a, axis, start), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.last_dim();
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut sum = 0.0;
            for &x in row {
                let e = (x - max).exp();
                sum += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= sum;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push("softmax", value, Op::Softmax(a), rg)
    }

    /// Normalises the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = self.value(a);
        let n = v.last_dim();
        let mut out = Vec::with_capacity(v.numel());
        let mut inv_std = Vec::with_capacity(v.numel() / n);
        for row in v.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|x| (x - mean) * is));
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push("layer_norm", value, Op::LayerNorm(a, inv_std), rg)
    }

    /// Rows of a `[rows, d]` table selected by `indices`, giving `[len, d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || indices.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("embedding", format!("indices into {s:?}")));
        }
        let d = s[1];
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            "embedding",
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Embedding(table, indices.to_vec()),
            rg,
        )
    }

    /// Sets positions where `mask` is true to `value`. The mask covers the
    /// trailing `mask.len()` elements and repeats over the leading axes.
    pub fn masked_fill(&mut self, a: Var, mask: Rc<Vec<bool>>, value: f64) -> Result<Var> {
        let v = self.value(a);
        if mask.is_empty() || v.numel() % mask.len() != 0 {
            return Err(Error::shape("masked_fill", format!("mask {} on {:?}", mask.len(), v.shape())));
        }
        let m = mask.len();
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % m] { value } else { x })
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push("masked_fill", value, Op::MaskedFill(a, mask), rg)
    }

    /// Sum of all elements (scalar).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn with_data(like: &Tensor, data: Vec<f64>) -> Tensor {
        Tensor::new(like.shape().to_vec(), data).expect("gradient matches value shape")
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, Self::with_data(g, gd.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accumulate(grads, *a, Self::with_data(g, gd.iter().zip(vb).map(|(x, y)| x * y).collect()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, Self::with_data(g, gd.iter().zip(va).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, Self::with_data(g, gd.iter().map(|x| x * c).collect()));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![n], db).expect("bias shape"));
                }
            }
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let sa = va.shape();
                let sb = vb.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if sb.len() == 2 {
                    if self.rg(*a) {
                        let mut da = vec![0.0; va.numel()];
                        gemm_nt(gd, vb.data(), &mut da, batch * m, n, k);
                        self.accumulate(grads, *a, Self::with_data(va, da));
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; vb.numel()];
                        gemm_tn(va.data(), gd, &mut db, batch * m, k, n);
                        self.accumulate(grads, *b, Self::with_data(vb, db));
                    }
                } else {
                    if self.rg(*a) {
                        let mut da = vec![0.0; va.numel()];
                        for i in 0..batch {
                            gemm_nt(
                                &gd[i * m * n..(i + 1) * m * n],
                                &vb.data()[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        self.accumulate(grads, *a, Self::with_data(va, da));
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; vb.numel()];
                        for i in 0..batch {
                            gemm_tn(
                                &va.data()[i * m * k..(i + 1) * m * k],
                                &gd[i * m * n..(i + 1) * m * n],
                                &mut db[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        self.accumulate(grads, *b, Self::with_data(vb, db));
                    }
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, transpose_data(g)),
            Op::Permute(a, perm) => self.accumulate(grads, *a, permute_data(g, &inverse_perm(perm))),
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape).expect("same size"));
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let len = ps[*axis];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps, d).expect("concat part"));
                    }
                    offset += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let shape = self.shape(*a).to_vec();
                let (outer, inner) = outer_inner(&shape, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let dst = o * shape[*axis] * inner + start * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *a, Tensor::new(shape, d).expect("slice source"));
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, Self::with_data(g, gd.iter().zip(out.data()).map(|(x, y)| x * y).collect()));
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, Self::with_data(g, gd.iter().zip(va).map(|(x, y)| x / y).collect()));
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(out.data()).map(|(x, y)| x * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, Self::with_data(g, d));
            }
            Op::Softplus(a) => {
                let va = self.value(*a).data();
                let d = gd.iter().zip(va).map(|(x, y)| x * sigmoid(*y)).collect();
                self.accumulate(grads, *a, Self::with_data(g, d));
            }
            Op::Square(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, Self::with_data(g, gd.iter().zip(va).map(|(x, y)| 2.0 * x * y).collect()));
            }
            Op::Softmax(a) => {
                let n = out.last_dim();
                let mut d = Vec::with_capacity(out.numel());
                for (yr, gr) in out.data().chunks(n).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                self.accumulate(grads, *a, Self::with_data(g, d));
            }
            Op::LayerNorm(a, inv_std) => {
                let n = out.last_dim();
                let nf = n as f64;
                let mut d = Vec::with_capacity(out.numel());
                for ((yr, gr), is) in out.data().chunks(n).zip(gd.chunks(n)).zip(inv_std) {
                    let mean_g = gr.iter().sum::<f64>() / nf;
                    let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / nf;
                    d.extend(gr.iter().zip(yr).map(|(g, y)| is * (g - mean_g - y * mean_gy)));
                }
                self.accumulate(grads, *a, Self::with_data(g, d));
            }
            Op::Embedding(table, indices) => {
                let tv = self.value(*table);
                let dim = tv.shape()[1];
                let mut d = vec![0.0; tv.numel()];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..dim {
                        d[i * dim + j] += gd[row * dim + j];
                    }
                }
                self.accumulate(grads, *table, Self::with_data(tv, d));
            }
            Op::MaskedFill(a, mask) => {
                let m = mask.len();
                let d = gd.iter().enumerate().map(|(i, &x)| if mask[i % m] { 0.0 } else { x }).collect();
                self.accumulate(grads, *a, Self::with_data(g, d));
            }
            Op::Sum(a) => {
                let s = gd[0];
                let like = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(like.shape(), s));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 7], |i| (i as f64 * 1.3).sin() * 20.0));
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_is_trapped() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0));
        assert!(matches!(g.log(x), Err(Error::NonFinite("log"))));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).is_err());
        assert!(g.slice(a, 1, 2, 2).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[1, 2, 0]).unwrap();
        assert_eq!(g.shape(p), &[3, 4, 2]);
        let back = g.permute(p, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(Tensor::scalar(5.0));
        let y = g.mul(c, p).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }
}
