//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is already a
//! topological order and [`Graph::backward`] is a single reverse sweep. Parameters live
//! outside the graph in a [`ParamStore`]; each one enters a graph at most once and its
//! gradient is accumulated (`+=`) back into the store, which makes parameter sharing
//! across loop iterations and summing several losses automatic.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{broadcast_binary, reduce_to_shape, Scalar, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, trans_b: bool },
    RmsNorm { x: Var, inv_rms: Vec<T> },
    Softmax(Var),
    Silu(Var),
    Gelu(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse(Var, Var),
    ReverseKl { student: Var, teacher: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Narrow { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Attention { qkv: Var, heads: usize, probs: Vec<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of operations executed since creation or the last [`Graph::reset`].
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    flops: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            flops: 0,
        }
    }

    /// A graph that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Forward FLOPs recorded so far: `2·m·n·p` per matrix product, attention scores and
    /// value aggregation included, elementwise work ignored.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Parameter values in any store are untouched.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.flops = 0;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Input tensor. With `requires_grad` its gradient is available after backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Places a stored parameter on the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Same values as `x`, detached from the tape: nothing flows back into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// Batched matrix product `[..., m, p] x [..., p, n]` with broadcast batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b), false)?;
        self.flops += 2 * (value.numel() * self.value(a).last_dim()) as u64;
        Ok(self.push(value, Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `a x bᵀ` where `b` is stored `[..., n, p]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b), true)?;
        self.flops += 2 * (value.numel() * self.value(a).last_dim()) as u64;
        Ok(self.push(value, Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    /// Affine map over the last dimension: `x W + bias` with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// RMS normalization over the last dimension, without affine parameters.
    pub fn rmsnorm(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("rmsnorm eps must be positive, got {eps}")));
        }
        if self.value(x).rank() == 0 {
            return Err(Error::Shape("rmsnorm needs at least one dimension".into()));
        }
        let (value, inv_rms) = kernels::rmsnorm(self.value(x), eps);
        Ok(self.push(value, Op::RmsNorm { x, inv_rms }, &[x]))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let value = kernels::softmax_lastdim(self.value(x));
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::silu);
        self.push(value, Op::Silu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), kernels::gelu_forward(xv.data())).unwrap();
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under `logits: [..., V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        if lv.rank() == 0 || lv.numel() / vocab != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} vs {} targets",
                lv.shape(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("target id {bad} outside vocabulary of {vocab}")));
        }
        let probs = kernels::softmax_lastdim(lv).into_data();
        let nll = kernels::nll_logsumexp(lv, targets);
        let value = Tensor::scalar(T::of(nll / targets.len() as f64));
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(value, op, &[logits]))
    }

    /// Element-mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("mse: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let sum: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum();
        let value = Tensor::scalar(T::of(sum / av.numel() as f64));
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    /// Row-mean of `KL(softmax(student) || softmax(teacher))` over the last dimension.
    pub fn reverse_kl(&mut self, student: Var, teacher: Var) -> Result<Var> {
        let (sv, tv) = (self.value(student), self.value(teacher));
        if sv.shape() != tv.shape() {
            return Err(Error::Shape(format!("reverse_kl: {:?} vs {:?}", sv.shape(), tv.shape())));
        }
        let kl = kernels::row_kl(sv, tv);
        let rows = kl.len().max(1);
        let value = Tensor::scalar(T::of(kl.iter().sum::<f64>() / rows as f64));
        Ok(self.push(value, Op::ReverseKl { student, teacher }, &[student, teacher]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(T::of(self.value(x).sum_f64()));
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(T::of(xv.sum_f64() / xv.numel() as f64));
        self.push(value, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Slice `[start, start + len)` of the last dimension.
    pub fn narrow_lastdim(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.last_dim();
        if xv.rank() == 0 || start + len > width {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) outside last dimension of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let rows = xv.numel() / width;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * width + start..r * width + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Narrow { x, start }, &[x]))
    }

    /// Rows of `table: [N, d]` selected by `ids`, shaped `[ids_shape..., d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::Shape(format!("gather_rows needs a 2-D table, got {:?}", tv.shape())));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape(format!("{} ids for shape {:?}", ids.len(), ids_shape)));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!("row {id} outside table of {rows} rows")));
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Causal multi-head self-attention over a fused `[B, T, 3d]` query/key/value tensor.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (value, probs) = kernels::attention_forward(self.value(qkv), heads)?;
        let (t, d) = (value.shape()[1], value.shape()[2]);
        self.flops += 4 * (value.shape()[0] * t * t * d) as u64;
        Ok(self.push(value, Op::Attention { qkv, heads, probs }, &[qkv]))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar `loss`. Gradients of this sweep replace any earlier ones
    /// on the tape; read them with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(loss_shape));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Runs [`Graph::backward`] and adds every parameter gradient into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = self.grads[v.0].as_ref() {
                store.get_mut(id).grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        let node = &self.nodes[i];
        let mut updates: Vec<(Var, Tensor<T>)> = Vec::with_capacity(2);
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if rg(a) {
                    updates.push((*a, reduce_to_shape(g, self.shape(*a))));
                }
                if rg(b) {
                    let gb = reduce_to_shape(g, self.shape(*b));
                    updates.push((*b, if negate { gb.map(|v| -v) } else { gb }));
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    let ga = broadcast_binary(g, self.value(*b), |x, y| x * y)?;
                    updates.push((*a, reduce_to_shape(&ga, self.shape(*a))));
                }
                if rg(b) {
                    let gb = broadcast_binary(g, self.value(*a), |x, y| x * y)?;
                    updates.push((*b, reduce_to_shape(&gb, self.shape(*b))));
                }
            }
            Op::AddScalar(x) => updates.push((*x, g.clone())),
            Op::Scale(x, s) => {
                let s = *s;
                updates.push((*x, g.map(|v| v * s)));
            }
            Op::MatMul { a, b, trans_b } => {
                let (ga, gb) = kernels::matmul_backward(
                    self.value(*a),
                    self.value(*b),
                    g,
                    *trans_b,
                    rg(a),
                    rg(b),
                )?;
                if let Some(ga) = ga {
                    updates.push((*a, ga));
                }
                if let Some(gb) = gb {
                    updates.push((*b, gb));
                }
            }
            Op::RmsNorm { x, inv_rms } => {
                updates.push((*x, kernels::rmsnorm_backward(&node.value, inv_rms, g)));
            }
            Op::Softmax(x) => updates.push((*x, kernels::softmax_backward(&node.value, g))),
            Op::Silu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| gy * kernels::silu_grad(x))
                    .collect();
                updates.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = kernels::gelu_backward(xv.data(), g.data());
                updates.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = self.value(*logits).last_dim();
                let scale = g.data()[0] / T::of(targets.len() as f64);
                let mut data: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    data[row * vocab + t] -= scale;
                }
                updates.push((*logits, Tensor::new(self.shape(*logits).to_vec(), data)?));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = g.data()[0] * T::of(2.0 / av.numel() as f64);
                let diff: Vec<T> =
                    av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * scale).collect();
                if rg(b) {
                    let neg = diff.iter().map(|&v| -v).collect();
                    updates.push((*b, Tensor::new(bv.shape().to_vec(), neg)?));
                }
                if rg(a) {
                    updates.push((*a, Tensor::new(av.shape().to_vec(), diff)?));
                }
            }
            Op::ReverseKl { student, teacher } => {
                let (gs, gt) = kernels::row_kl_backward(
                    self.value(*student),
                    self.value(*teacher),
                    g.data()[0],
                );
                if rg(student) {
                    updates.push((*student, gs));
                }
                if rg(teacher) {
                    updates.push((*teacher, gt));
                }
            }
            Op::Sum(x) => updates.push((*x, Tensor::full(self.shape(*x).to_vec(), g.data()[0]))),
            Op::Mean(x) => {
                let n = T::of(self.value(*x).numel() as f64);
                updates.push((*x, Tensor::full(self.shape(*x).to_vec(), g.data()[0] / n)));
            }
            Op::Reshape(x) => updates.push((*x, g.clone().reshape(self.shape(*x).to_vec())?)),
            Op::Narrow { x, start } => {
                let xs = self.shape(*x).to_vec();
                let width = *xs.last().unwrap();
                let len = g.last_dim();
                let mut data = vec![T::zero(); xs.iter().product()];
                for (r, chunk) in g.data().chunks(len).enumerate() {
                    data[r * width + start..r * width + start + len].copy_from_slice(chunk);
                }
                updates.push((*x, Tensor::new(xs, data)?));
            }
            Op::Gather { table, ids } => {
                let ts = self.shape(*table).to_vec();
                let d = ts[1];
                let mut data = vec![T::zero(); ts[0] * d];
                for (k, &id) in ids.iter().enumerate() {
                    for (dst, &src) in data[id * d..(id + 1) * d].iter_mut().zip(&g.data()[k * d..]) {
                        *dst += src;
                    }
                }
                updates.push((*table, Tensor::new(ts, data)?));
            }
            Op::Attention { qkv, heads, probs } => {
                let gq = kernels::attention_backward(self.value(*qkv), *heads, probs, g)?;
                updates.push((*qkv, gq));
            }
        }
        for (v, gv) in updates {
            self.accumulate(v, gv);
        }
        Ok(())
    }
}

pub(crate) mod kernels {
    //! Forward/backward numerics. Reductions accumulate in `f64`.

    use super::*;

    pub fn silu<T: Scalar>(x: T) -> T {
        x / (T::one() + (-x).exp())
    }

    pub fn silu_grad<T: Scalar>(x: T) -> T {
        let s = T::one() / (T::one() + (-x).exp());
        s * (T::one() + x * (T::one() - s))
    }

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const GELU_A: f64 = 0.044_715;

    /// `σ(2u)` for `u = c·(x + a·x³)`, so that `gelu(x) = x·σ(2u) = ½x(1 + tanh u)`.
    fn gelu_gate<T: Scalar>(x: &[T]) -> Vec<T> {
        let (c, a) = (T::of(-2.0 * GELU_C), T::of(GELU_A));
        let mut e: Vec<T> = x.iter().map(|&x| c * (x + a * x * x * x)).collect();
        T::exp_in_place(&mut e);
        e.iter_mut().for_each(|v| *v = T::one() / (T::one() + *v));
        e
    }

    pub fn gelu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
        let mut s = gelu_gate(x);
        s.iter_mut().zip(x).for_each(|(s, &x)| *s *= x);
        s
    }

    pub fn gelu_backward<T: Scalar>(x: &[T], g: &[T]) -> Vec<T> {
        let (c, a3, two) = (T::of(GELU_C), T::of(3.0 * GELU_A), T::of(2.0));
        let mut s = gelu_gate(x);
        s.iter_mut().zip(x).zip(g).for_each(|((s, &x), &gy)| {
            let du = c * (T::one() + a3 * x * x);
            *s = gy * (*s + two * x * *s * (T::one() - *s) * du);
        });
        s
    }

    pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, eps: f64) -> (Tensor<T>, Vec<T>) {
        let d = x.last_dim();
        let mut out = Vec::with_capacity(x.numel());
        let mut inv = Vec::with_capacity(x.numel() / d.max(1));
        for row in x.data().chunks(d) {
            let ms = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / d as f64;
            let r = T::of(1.0 / (ms + eps).sqrt());
            inv.push(r);
            out.extend(row.iter().map(|&v| v * r));
        }
        (Tensor::new(x.shape().to_vec(), out).unwrap(), inv)
    }

    pub fn rmsnorm_backward<T: Scalar>(y: &Tensor<T>, inv_rms: &[T], g: &Tensor<T>) -> Tensor<T> {
        let d = y.last_dim();
        let mut out = Vec::with_capacity(y.numel());
        for ((yr, gr), &r) in y.data().chunks(d).zip(g.data().chunks(d)).zip(inv_rms) {
            let dot = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>();
            let m = T::of(dot / d as f64);
            out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| r * (gv - yv * m)));
        }
        Tensor::new(y.shape().to_vec(), out).unwrap()
    }

    fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
        out.copy_from_slice(row);
        softmax_in_place(out);
    }

    fn softmax_in_place<T: Scalar>(row: &mut [T]) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.iter_mut().for_each(|v| *v -= max);
        T::exp_in_place(row);
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        let inv = T::of(1.0 / sum);
        row.iter_mut().for_each(|v| *v *= inv);
    }

    pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        let d = x.last_dim();
        let mut out = vec![T::zero(); x.numel()];
        for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(row, o);
        }
        Tensor::new(x.shape().to_vec(), out).unwrap()
    }

    pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
        let d = y.last_dim();
        let mut out = Vec::with_capacity(y.numel());
        for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
            let dot = T::of(yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum());
            out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
        }
        Tensor::new(y.shape().to_vec(), out).unwrap()
    }

    fn log_softmax_row(row: &[f64]) -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter().map(|v| v - lse).collect()
    }

    pub fn nll_logsumexp<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> f64 {
        let v = logits.last_dim();
        logits
            .data()
            .chunks(v)
            .zip(targets)
            .map(|(row, &t)| {
                let row: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
                -log_softmax_row(&row)[t]
            })
            .sum()
    }

    pub fn row_kl<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>) -> Vec<f64> {
        let v = student.last_dim();
        student
            .data()
            .chunks(v)
            .zip(teacher.data().chunks(v))
            .map(|(s, t)| {
                let ls = log_softmax_row(&s.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
                let lt = log_softmax_row(&t.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
                ls.iter().zip(&lt).map(|(a, b)| a.exp() * (a - b)).sum()
            })
            .collect()
    }

    pub fn row_kl_backward<T: Scalar>(
        student: &Tensor<T>,
        teacher: &Tensor<T>,
        g: T,
    ) -> (Tensor<T>, Tensor<T>) {
        let v = student.last_dim();
        let rows = (student.numel() / v).max(1);
        let scale = g.as_f64() / rows as f64;
        let mut gs = Vec::with_capacity(student.numel());
        let mut gt = Vec::with_capacity(student.numel());
        for (s, t) in student.data().chunks(v).zip(teacher.data().chunks(v)) {
            let ls = log_softmax_row(&s.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
            let lt = log_softmax_row(&t.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
            let kl: f64 = ls.iter().zip(&lt).map(|(a, b)| a.exp() * (a - b)).sum();
            for (a, b) in ls.iter().zip(&lt) {
                let (q, p) = (a.exp(), b.exp());
                gs.push(T::of(scale * q * (a - b - kl)));
                gt.push(T::of(scale * (p - q)));
            }
        }
        let shape = student.shape().to_vec();
        (Tensor::new(shape.clone(), gs).unwrap(), Tensor::new(shape, gt).unwrap())
    }

    /// Strided read-only matrix view into a slice.
    #[derive(Clone, Copy)]
    struct View<'a, T> {
        data: &'a [T],
        off: usize,
        rs: usize,
        cs: usize,
    }

    /// Safe wrapper: `c[coff..] (rows rsc) <- alpha a b + beta c`, all bounds checked.
    #[allow(clippy::too_many_arguments)]
    fn gemm<T: Scalar>(
        m: usize,
        k: usize,
        n: usize,
        alpha: T,
        a: View<'_, T>,
        b: View<'_, T>,
        beta: T,
        c: &mut [T],
        coff: usize,
        rsc: usize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        let last = |v: &View<'_, T>, rows: usize, cols: usize| {
            v.off + (rows.max(1) - 1) * v.rs + (cols.max(1) - 1) * v.cs
        };
        assert!(k == 0 || last(&a, m, k) < a.data.len(), "gemm: lhs view out of bounds");
        assert!(k == 0 || last(&b, k, n) < b.data.len(), "gemm: rhs view out of bounds");
        assert!(coff + (m - 1) * rsc + (n - 1) < c.len(), "gemm: output view out of bounds");
        // SAFETY: every index touched lies within the bounds asserted above, and `c` is
        // borrowed mutably so it cannot alias `a` or `b`.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr().add(a.off),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr().add(b.off),
                b.rs as isize,
                b.cs as isize,
                beta,
                c.as_mut_ptr().add(coff),
                rsc as isize,
                1,
            );
        }
    }

    struct MatmulDims {
        m: usize,
        p: usize,
        n: usize,
        out_batch: Vec<usize>,
        a_batch_strides: Vec<usize>,
        b_batch_strides: Vec<usize>,
    }

    fn matmul_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<MatmulDims> {
        let err = || {
            Error::Shape(format!(
                "matmul: cannot multiply {:?} by {:?}{}",
                a.shape(),
                b.shape(),
                if trans_b { "ᵀ" } else { "" }
            ))
        };
        if a.rank() < 2 || b.rank() < 2 {
            return Err(err());
        }
        let (ar, br) = (a.rank(), b.rank());
        let (m, p) = (a.shape()[ar - 2], a.shape()[ar - 1]);
        let (p2, n) = if trans_b {
            (b.shape()[br - 1], b.shape()[br - 2])
        } else {
            (b.shape()[br - 2], b.shape()[br - 1])
        };
        if p != p2 {
            return Err(err());
        }
        let (ab, bb) = (&a.shape()[..ar - 2], &b.shape()[..br - 2]);
        let out_batch = crate::tensor::broadcast_shape(ab, bb).map_err(|_| err())?;
        let a_batch_strides = crate::tensor::broadcast_strides(ab, &out_batch);
        let b_batch_strides = crate::tensor::broadcast_strides(bb, &out_batch);
        Ok(MatmulDims { m, p, n, out_batch, a_batch_strides, b_batch_strides })
    }

    /// Matrix offsets (in units of whole matrices) of `a` and `b` for each output batch.
    fn batch_offsets(dims: &MatmulDims) -> Vec<(usize, usize)> {
        let count: usize = dims.out_batch.iter().product();
        (0..count)
            .map(|flat| {
                let (mut rem, mut oa, mut ob) = (flat, 0, 0);
                for axis in (0..dims.out_batch.len()).rev() {
                    let i = rem % dims.out_batch[axis];
                    rem /= dims.out_batch[axis];
                    oa += i * dims.a_batch_strides[axis];
                    ob += i * dims.b_batch_strides[axis];
                }
                (oa, ob)
            })
            .collect()
    }

    fn b_view<T: Scalar>(data: &[T], off: usize, p: usize, n: usize, trans_b: bool) -> View<'_, T> {
        if trans_b {
            View { data, off, rs: 1, cs: p }
        } else {
            View { data, off, rs: n, cs: 1 }
        }
    }

    pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
        let dims = matmul_dims(a, b, trans_b)?;
        let MatmulDims { m, p, n, .. } = dims;
        let mut shape = dims.out_batch.clone();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); shape.iter().product()];
        if b.rank() == 2 && a.rank() >= 2 {
            // Fold all batch dimensions of `a` into its row count.
            let rows = a.numel() / p.max(1);
            let av = View { data: a.data(), off: 0, rs: p, cs: 1 };
            gemm(rows, p, n, T::one(), av, b_view(b.data(), 0, p, n, trans_b), T::zero(), &mut out, 0, n);
        } else {
            for (bi, (oa, ob)) in batch_offsets(&dims).into_iter().enumerate() {
                let av = View { data: a.data(), off: oa * m * p, rs: p, cs: 1 };
                let bv = b_view(b.data(), ob * p * n, p, n, trans_b);
                gemm(m, p, n, T::one(), av, bv, T::zero(), &mut out, bi * m * n, n);
            }
        }
        Tensor::new(shape, out)
    }

    pub fn matmul_backward<T: Scalar>(
        a: &Tensor<T>,
        b: &Tensor<T>,
        g: &Tensor<T>,
        trans_b: bool,
        need_a: bool,
        need_b: bool,
    ) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        let dims = matmul_dims(a, b, trans_b)?;
        let MatmulDims { m, p, n, .. } = dims;
        let mut ga = need_a.then(|| vec![T::zero(); a.numel()]);
        let mut gb = need_b.then(|| vec![T::zero(); b.numel()]);
        let gd = g.data();
        let fold = b.rank() == 2;
        let offsets = if fold {
            vec![(0, 0)]
        } else {
            batch_offsets(&dims)
        };
        let rows = if fold { a.numel() / p.max(1) } else { m };
        for (bi, (oa, ob)) in offsets.into_iter().enumerate() {
            let a_off = oa * m * p;
            let b_off = ob * p * n;
            let g_view = View { data: gd, off: bi * m * n, rs: n, cs: 1 };
            if let Some(ga) = ga.as_mut() {
                // dA = dC Bᵀ, where Bᵀ as a [n, p] view of the stored operand.
                let bt = if trans_b {
                    View { data: b.data(), off: b_off, rs: p, cs: 1 }
                } else {
                    View { data: b.data(), off: b_off, rs: 1, cs: n }
                };
                gemm(rows, n, p, T::one(), g_view, bt, T::one(), ga, a_off, p);
            }
            if let Some(gb) = gb.as_mut() {
                let at = View { data: a.data(), off: a_off, rs: 1, cs: p };
                if trans_b {
                    // stored B is [n, p]: dB = dCᵀ A
                    let gt = View { data: gd, off: bi * m * n, rs: 1, cs: n };
                    let av = View { data: a.data(), off: a_off, rs: p, cs: 1 };
                    gemm(n, rows, p, T::one(), gt, av, T::one(), gb, b_off, p);
                } else {
                    gemm(p, rows, n, T::one(), at, g_view, T::one(), gb, b_off, n);
                }
            }
        }
        let ga = ga.map(|d| Tensor::new(a.shape().to_vec(), d)).transpose()?;
        let gb = gb.map(|d| Tensor::new(b.shape().to_vec(), d)).transpose()?;
        Ok((ga, gb))
    }

    pub fn attention_forward<T: Scalar>(qkv: &Tensor<T>, heads: usize) -> Result<(Tensor<T>, Vec<T>)> {
        if qkv.rank() != 3 || !qkv.shape()[2].is_multiple_of(3) {
            return Err(Error::Shape(format!("attention expects [B, T, 3d], got {:?}", qkv.shape())));
        }
        let (bsz, t, d) = (qkv.shape()[0], qkv.shape()[1], qkv.shape()[2] / 3);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("hidden size {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let x = qkv.data();
        let mut out = vec![T::zero(); bsz * t * d];
        let mut probs = vec![T::zero(); bsz * heads * t * t];
        for b in 0..bsz {
            let base = b * t * 3 * d;
            for h in 0..heads {
                let pb = (b * heads + h) * t * t;
                let q = View { data: x, off: base + h * dh, rs: 3 * d, cs: 1 };
                let kt = View { data: x, off: base + d + h * dh, rs: 1, cs: 3 * d };
                let scores = &mut probs[pb..pb + t * t];
                gemm(t, dh, t, scale, q, kt, T::zero(), scores, 0, t);
                for i in 0..t {
                    let row = &mut scores[i * t..(i + 1) * t];
                    let (live, masked) = row.split_at_mut(i + 1);
                    softmax_in_place(live);
                    masked.iter_mut().for_each(|v| *v = T::zero());
                }
                let pv = View { data: &probs[..], off: pb, rs: t, cs: 1 };
                let v = View { data: x, off: base + 2 * d + h * dh, rs: 3 * d, cs: 1 };
                gemm(t, t, dh, T::one(), pv, v, T::zero(), &mut out, b * t * d + h * dh, d);
            }
        }
        Ok((Tensor::new([bsz, t, d], out)?, probs))
    }

    pub fn attention_backward<T: Scalar>(
        qkv: &Tensor<T>,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (bsz, t, d) = (qkv.shape()[0], qkv.shape()[1], qkv.shape()[2] / 3);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let x = qkv.data();
        let gd = g.data();
        let mut gq = vec![T::zero(); qkv.numel()];
        let mut dp = vec![T::zero(); t * t];
        for b in 0..bsz {
            let base = b * t * 3 * d;
            for h in 0..heads {
                let pb = (b * heads + h) * t * t;
                let p = &probs[pb..pb + t * t];
                let go = View { data: gd, off: b * t * d + h * dh, rs: d, cs: 1 };
                // dP = dO Vᵀ
                let vt = View { data: x, off: base + 2 * d + h * dh, rs: 1, cs: 3 * d };
                gemm(t, dh, t, T::one(), go, vt, T::zero(), &mut dp, 0, t);
                // dV = Pᵀ dO
                let pt = View { data: p, off: 0, rs: 1, cs: t };
                gemm(t, t, dh, T::one(), pt, go, T::one(), &mut gq, base + 2 * d + h * dh, 3 * d);
                // dS = P ⊙ (dP - rowsum(dP ⊙ P)), scaled
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot = pr[..=i]
                        .iter()
                        .zip(&dr[..=i])
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum::<f64>();
                    let dot = T::of(dot);
                    for j in 0..t {
                        dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { T::zero() };
                    }
                }
                let ds = View { data: &dp[..], off: 0, rs: t, cs: 1 };
                let k = View { data: x, off: base + d + h * dh, rs: 3 * d, cs: 1 };
                gemm(t, t, dh, T::one(), ds, k, T::one(), &mut gq, base + h * dh, 3 * d);
                let dst = View { data: &dp[..], off: 0, rs: 1, cs: t };
                let q = View { data: x, off: base + h * dh, rs: 3 * d, cs: 1 };
                gemm(t, t, dh, T::one(), dst, q, T::one(), &mut gq, base + d + h * dh, 3 * d);
            }
        }
        Tensor::new(qkv.shape().to_vec(), gq)
    }
}
