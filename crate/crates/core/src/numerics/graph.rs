use std::collections::HashMap;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{invalid, Error, Result};

/// Marks a cross-entropy target position that contributes no loss.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, count: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so index order is a topological
/// order and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: HashMap<ParamId, Var>,
    score_entries: u64,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn add_into(acc: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let g = acc.get_or_insert_with(|| Tensor::zeros(shape));
    f(g.data_mut());
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` call, if this node received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Returns the leaf bound to `id`, creating a trainable leaf on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bindings.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.bindings.insert(id, v);
        v
    }

    /// Binds `id` to an existing node; later `param` calls return it.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.bindings.insert(id, v);
    }

    /// Parameters read by this graph so far.
    pub fn bound_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.bindings.keys().copied().collect();
        ids.sort();
        ids
    }

    /// Gradients for every parameter in `store`, zeros for unbound ones.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.bindings.get(&id).and_then(|v| self.grad(*v)) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(id).shape()),
            })
            .collect()
    }

    /// Adds to the attention score-entry counter (`Tq·Tk` per attention call).
    pub fn count_scores(&mut self, entries: u64) {
        self.score_entries += entries;
    }

    pub fn score_entries(&self) -> u64 {
        self.score_entries
    }

    /// Bytes held by node values; the graph keeps every intermediate alive,
    /// so this is the high-water mark of a forward pass.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel() * 8).sum()
    }

    // ---- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", ta)?;
        let (br, bc) = require_2d("matmul", tb)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        if trans_b {
            gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        } else {
            gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = require_2d("transpose", t)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.numel() != n || tb.ndim() != 1 {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| f(*v)).collect();
        Tensor::new(tx.shape().to_vec(), data).expect("same shape")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::gelu);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(invalid(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Row-wise softmax of a 2-D tensor over the `allowed` entries only
    /// (row-major `[rows×cols]` booleans). Disallowed entries act as `-inf`;
    /// a row with no allowed entry yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_2d("masked_softmax", tx)?;
        if allowed.len() != r * c {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: tx.shape().to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            kernels::masked_softmax_row(
                &tx.data()[i * c..(i + 1) * c],
                &allowed[i * c..(i + 1) * c],
                &mut out[i * c..(i + 1) * c],
            );
        }
        let t = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaskedSoftmax { x }, rg))
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.numel() / n;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Gathers rows of `table` (`[V×d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = require_2d("embedding", tt)?;
        if ids.is_empty() {
            return Err(invalid("embedding of an empty id list"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::UnknownToken { id, vocab: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = require_2d("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_2d("slice_cols", tx)?;
        if start >= end || end > c {
            return Err(invalid(format!("column slice [{start},{end}) of {:?}", tx.shape())));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&tx.row(i)[start..end]);
        }
        let t = Tensor::new(vec![r, end - start], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    /// Mean token negative log-likelihood over positions whose target is not
    /// [`IGNORE_INDEX`]. With no scored position the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (t, v) = require_2d("cross_entropy", tl)?;
        if targets.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        let mut count = 0;
        for (i, &target) in targets.iter().enumerate() {
            if target == IGNORE_INDEX {
                continue;
            }
            if target >= v {
                return Err(Error::UnknownToken { id: target, vocab: v });
            }
            let row = tl.row(i);
            let p = &mut probs[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                sum += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= sum;
            }
            total += -(row[target] - max - sum.ln());
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    // ---- reverse sweep ------------------------------------------------------

    /// Back-propagates from a single-element `loss`, populating the gradient
    /// of every node that requires one and is reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let go = gout.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                if rg(*a) {
                    add_into(&mut grads[a.0], ta.shape(), |g| {
                        if *trans_b {
                            gemm_nn(go, tb.data(), g, m, n, k);
                        } else {
                            gemm_nt(go, tb.data(), g, m, n, k);
                        }
                    });
                }
                if rg(*b) {
                    add_into(&mut grads[b.0], tb.shape(), |g| {
                        if *trans_b {
                            gemm_tn(go, ta.data(), g, m, n, k);
                        } else {
                            gemm_tn(ta.data(), go, g, m, k, n);
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                if rg(*x) {
                    let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                    add_into(&mut grads[x.0], val(*x).shape(), |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] += go[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    add_into(&mut grads[a.0], val(*a).shape(), |g| {
                        g.iter_mut().zip(go).for_each(|(g, d)| *g += d)
                    });
                }
                if rg(*b) {
                    add_into(&mut grads[b.0], val(*b).shape(), |g| {
                        g.iter_mut().zip(go).for_each(|(g, d)| *g += sign * d)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if rg(*a) {
                    add_into(&mut grads[a.0], ta.shape(), |g| {
                        for ((g, d), y) in g.iter_mut().zip(go).zip(tb.data()) {
                            *g += d * y;
                        }
                    });
                }
                if rg(*b) {
                    add_into(&mut grads[b.0], tb.shape(), |g| {
                        for ((g, d), x) in g.iter_mut().zip(go).zip(ta.data()) {
                            *g += d * x;
                        }
                    });
                }
            }
            Op::AddBias { x, bias } => {
                if rg(*x) {
                    add_into(&mut grads[x.0], val(*x).shape(), |g| {
                        g.iter_mut().zip(go).for_each(|(g, d)| *g += d)
                    });
                }
                if rg(*bias) {
                    let n = val(*bias).numel();
                    add_into(&mut grads[bias.0], val(*bias).shape(), |g| {
                        for row in go.chunks(n) {
                            g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                        }
                    });
                }
            }
            Op::Scale(x, s) => {
                if rg(*x) {
                    add_into(&mut grads[x.0], val(*x).shape(), |g| {
                        g.iter_mut().zip(go).for_each(|(g, d)| *g += s * d)
                    });
                }
            }
            Op::Gelu(x) => {
                if rg(*x) {
                    let tx = val(*x);
                    add_into(&mut grads[x.0], tx.shape(), |g| {
                        for ((g, d), v) in g.iter_mut().zip(go).zip(tx.data()) {
                            *g += d * kernels::gelu_grad(*v);
                        }
                    });
                }
            }
            Op::Tanh(x) => {
                if rg(*x) {
                    let y = node.value.data();
                    add_into(&mut grads[x.0], val(*x).shape(), |g| {
                        for ((g, d), y) in g.iter_mut().zip(go).zip(y) {
                            *g += d * (1.0 - y * y);
                        }
                    });
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if rg(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = (*outer, *len, *inner);
                    add_into(&mut grads[x.0], val(*x).shape(), |g| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |j: usize| (o * len + j) * inner + i;
                                let dot: f64 = (0..len).map(|j| y[idx(j)] * go[idx(j)]).sum();
                                for j in 0..len {
                                    g[idx(j)] += y[idx(j)] * (go[idx(j)] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::MaskedSoftmax { x } => {
                if rg(*x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    add_into(&mut grads[x.0], val(*x).shape(), |g| {
                        for ((grow, yrow), drow) in g.chunks_mut(c).zip(y.chunks(c)).zip(go.chunks(c)) {
                            let dot: f64 = yrow.iter().zip(drow).map(|(a, b)| a * b).sum();
                            for ((g, y), d) in grow.iter_mut().zip(yrow).zip(drow) {
                                *g += y * (d - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = node.value.cols();
                let tg = val(*gain).data();
                if rg(*gain) {
                    add_into(&mut grads[gain.0], val(*gain).shape(), |g| {
                        for (hrow, drow) in xhat.chunks(n).zip(go.chunks(n)) {
                            for j in 0..n {
                                g[j] += hrow[j] * drow[j];
                            }
                        }
                    });
                }
                if rg(*bias) {
                    add_into(&mut grads[bias.0], val(*bias).shape(), |g| {
                        for drow in go.chunks(n) {
                            g.iter_mut().zip(drow).for_each(|(g, d)| *g += d);
                        }
                    });
                }
                if rg(*x) {
                    add_into(&mut grads[x.0], val(*x).shape(), |g| {
                        for (r, ((grow, hrow), drow)) in
                            g.chunks_mut(n).zip(xhat.chunks(n)).zip(go.chunks(n)).enumerate()
                        {
                            // dxhat = dy * gain
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for j in 0..n {
                                let dh = drow[j] * tg[j];
                                mean_d += dh;
                                mean_dh += dh * hrow[j];
                            }
                            mean_d /= n as f64;
                            mean_dh /= n as f64;
                            for j in 0..n {
                                let dh = drow[j] * tg[j];
                                grow[j] += inv_std[r] * (dh - mean_d - hrow[j] * mean_dh);
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if rg(*table) {
                    let d = val(*table).cols();
                    add_into(&mut grads[table.0], val(*table).shape(), |g| {
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                g[id * d + j] += go[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).numel();
                    if rg(*p) {
                        add_into(&mut grads[p.0], val(*p).shape(), |g| {
                            g.iter_mut()
                                .zip(&go[offset..offset + len])
                                .for_each(|(g, d)| *g += d)
                        });
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if rg(*x) {
                    let c = val(*x).cols();
                    let off = start * c;
                    add_into(&mut grads[x.0], val(*x).shape(), |g| {
                        g[off..off + go.len()]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(g, d)| *g += d)
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if rg(*p) {
                        add_into(&mut grads[p.0], val(*p).shape(), |g| {
                            for i in 0..rows {
                                for j in 0..w {
                                    g[i * w + j] += go[i * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if rg(*x) {
                    let c = val(*x).cols();
                    let w = node.value.cols();
                    add_into(&mut grads[x.0], val(*x).shape(), |g| {
                        for (i, drow) in go.chunks(w).enumerate() {
                            for j in 0..w {
                                g[i * c + start + j] += drow[j];
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if rg(*logits) && *count > 0 {
                    let v = val(*logits).cols();
                    let scale = go[0] / *count as f64;
                    add_into(&mut grads[logits.0], val(*logits).shape(), |g| {
                        for (i, &t) in targets.iter().enumerate() {
                            if t == IGNORE_INDEX {
                                continue;
                            }
                            for j in 0..v {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                g[i * v + j] += scale * (probs[i * v + j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    add_into(&mut grads[x.0], val(*x).shape(), |g| {
                        g.iter_mut().zip(go).for_each(|(g, d)| *g += d)
                    });
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    add_into(&mut grads[x.0], val(*x).shape(), |g| {
                        g.iter_mut().for_each(|g| *g += go[0])
                    });
                }
            }
            Op::Mean(x) => {
                if rg(*x) {
                    let n = val(*x).numel() as f64;
                    add_into(&mut grads[x.0], val(*x).shape(), |g| {
                        g.iter_mut().for_each(|g| *g += go[0] / n)
                    });
                }
            }
        }
    }
}
