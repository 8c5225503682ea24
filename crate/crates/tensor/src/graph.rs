use rand::Rng;

use crate::kernels::{self, MatRef};
use crate::{Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax(Var),
    CausalSoftmax {
        x: Var,
        scale: S,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<S>,
        count: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    Sum(Var),
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::CausalSoftmax { .. } => "causal_softmax",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::Dropout { .. } => "dropout",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Computation tape for one forward/backward pass.
///
/// Nodes are appended in execution order, which is a topological order;
/// [`Graph::backward`] walks it in exact reverse. Gradient buffers are
/// allocated lazily and only for nodes with `requires_grad`, so leaves
/// registered as frozen never receive one.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    grad_allocations: usize,
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn require_matrix<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected a matrix".into(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, allocations: &mut usize, shape: &[usize], f: impl FnOnce(&mut [S])) {
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
        *allocations += 1;
    }
    f(slot.as_mut().expect("allocated above").data_mut());
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_allocations: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input tensor. Only leaves with `requires_grad` (and the
    /// nodes computed from them) take part in the backward pass.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated for `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }

    /// Number of gradient buffers allocated so far (instrumentation).
    pub fn grad_allocations(&self) -> usize {
        self.grad_allocations
    }

    /// `a·b` for matrices `a: p×q`, `b: q×r`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: p×q`, `b: r×q`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let op = "matmul";
        let (ta, tb) = (self.value(a), self.value(b));
        let (p, q) = require_matrix(op, ta)?;
        let (br, bc) = require_matrix(op, tb)?;
        let (bq, r) = if transpose_b { (bc, br) } else { (br, bc) };
        if q != bq {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let mut out = vec![S::zero(); p * r];
        let bm = MatRef::new(tb.data(), br, bc);
        kernels::gemm(
            MatRef::new(ta.data(), p, q),
            if transpose_b { bm.t() } else { bm },
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![p, r], out)?, Op::MatMul { a, b, transpose_b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta.shape(), tb.shape()));
        }
        let out: Vec<S> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg)
    }

    /// Adds a length-`d` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.cols();
        if tb.rank() != 1 || tb.numel() != d {
            return Err(mismatch("add_row", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v = *v + b;
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::new(shape, out)?, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| v * factor).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Gelu(x), rg)
    }

    /// Normalizes each row over the last axis with the population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if d == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        if eps <= S::zero() {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: tx.shape().to_vec(),
                reason: "eps must be positive".into(),
            });
        }
        let n = tx.rows();
        let dd = S::lit(d as f64);
        let mut xhat = vec![S::zero(); n * d];
        let mut rstd = vec![S::zero(); n];
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let row = tx.row(i);
            let mean = kernels::sum(row) / dd;
            let var = row.iter().fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dd;
            let r = S::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut out = tx.data().to_vec();
        let d = tx.cols();
        if d > 0 {
            out.chunks_mut(d).for_each(kernels::softmax_in_place);
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg)
    }

    /// Row-wise softmax of `scale·x` over a square score matrix where row `i`
    /// may only attend to columns `j <= i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var, scale: S) -> Result<Var> {
        let tx = self.value(x);
        let (t, tc) = require_matrix("causal_softmax", tx)?;
        if t != tc {
            return Err(mismatch("causal_softmax", tx.shape(), &[t, t]));
        }
        let mut out = vec![S::zero(); t * t];
        for i in 0..t {
            let row = &mut out[i * t..i * t + i + 1];
            for (o, &v) in row.iter_mut().zip(&tx.row(i)[..=i]) {
                *o = v * scale;
            }
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![t, t], out)?, Op::CausalSoftmax { x, scale }, rg)
    }

    /// Gathers rows of `table` (`n × d`) by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = require_matrix("embedding", tt)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: n,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = require_matrix("cross_entropy", tl)?;
        if targets.len() != n || mask.len() != n {
            return Err(mismatch("cross_entropy", tl.shape(), &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let mut probs = Vec::with_capacity(count * v);
        let mut total = S::zero();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = tl.row(i);
            total = total + (kernels::log_sum_exp(row) - row[t]);
            let start = probs.len();
            probs.extend_from_slice(row);
            kernels::softmax_in_place(&mut probs[start..]);
        }
        let loss = total / S::lit(count as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = require_matrix("slice_cols", tx)?;
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat_cols",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let n = require_matrix("concat_cols", self.value(*first))?.0;
        let mut total = 0;
        for &p in parts {
            let (pn, pc) = require_matrix("concat_cols", self.value(p))?;
            if pn != n {
                return Err(mismatch("concat_cols", self.value(*first).shape(), self.value(p).shape()));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = require_matrix("slice_rows", tx)?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: n,
            });
        }
        let out = tx.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![len, c], out)?, Op::SliceRows { x, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat_rows",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let c = require_matrix("concat_rows", self.value(*first))?.1;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let tp = self.value(p);
            let (pn, pc) = require_matrix("concat_rows", tp)?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(*first).shape(), tp.shape()));
            }
            out.extend_from_slice(tp.data());
            n += pn;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![n, c], out)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the
    /// survivors by `1/(1-p)`. `p == 0` records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(TensorError::InvalidShape {
                op: "dropout",
                shape: self.value(x).shape().to_vec(),
                reason: format!("rate {p} must be below 1"),
            });
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let tx = self.value(x);
        let mask: Vec<S> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let out = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Dropout { x, mask }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = kernels::sum(self.value(x).data());
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar node. Gradients accumulate into the
    /// buffers of every node that requires them; intermediate buffers are
    /// released once propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let shape = self.value(loss).shape().to_vec();
        self.grads[loss.0] = Some(Tensor::ones(&shape));
        self.grad_allocations += 1;

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &Tensor<S>) {
        let Self {
            nodes,
            grads,
            grad_allocations,
        } = self;
        let node = &nodes[idx];
        let gd = g.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], grad_allocations, nodes[v.0].value.shape(), |buf| f(buf));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (p, q) = (ta.shape()[0], ta.shape()[1]);
                let (br, bc) = (tb.shape()[0], tb.shape()[1]);
                let r = if *transpose_b { br } else { bc };
                let gm = MatRef::new(gd, p, r);
                let bm = MatRef::new(tb.data(), br, bc);
                let am = MatRef::new(ta.data(), p, q);
                // dA = dC·Bᵀ, or dC·B when the forward used Bᵀ.
                acc(*a, &mut |buf| {
                    kernels::gemm(gm, if *transpose_b { bm } else { bm.t() }, buf, true)
                });
                // dB = Aᵀ·dC, or dCᵀ·A when the forward used Bᵀ.
                acc(*b, &mut |buf| {
                    if *transpose_b {
                        kernels::gemm(gm.t(), am, buf, true)
                    } else {
                        kernels::gemm(am.t(), gm, buf, true)
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |buf| buf.iter_mut().zip(gd).for_each(|(o, &x)| *o = *o + x));
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |buf| buf.iter_mut().zip(gd).for_each(|(o, &x)| *o = *o + x));
                let d = nodes[bias.0].value.numel();
                acc(*bias, &mut |buf| {
                    for row in gd.chunks(d) {
                        buf.iter_mut().zip(row).for_each(|(o, &x)| *o = *o + x);
                    }
                });
            }
            Op::Scale(x, f) => {
                acc(*x, &mut |buf| buf.iter_mut().zip(gd).for_each(|(o, &x)| *o = *o + x * *f));
            }
            Op::Relu(x) => {
                let xs = nodes[x.0].value.data();
                acc(*x, &mut |buf| {
                    for ((o, &g), &v) in buf.iter_mut().zip(gd).zip(xs) {
                        if v > S::zero() {
                            *o = *o + g;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xs = nodes[x.0].value.data();
                acc(*x, &mut |buf| {
                    for ((o, &g), &v) in buf.iter_mut().zip(gd).zip(xs) {
                        *o = *o + g * kernels::gelu_grad(v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.numel();
                let gam = nodes[gamma.0].value.data();
                let dd = S::lit(d as f64);
                acc(*x, &mut |buf| {
                    let mut dxhat = vec![S::zero(); d];
                    for (i, (grow, orow)) in gd.chunks(d).zip(buf.chunks_mut(d)).enumerate() {
                        let h = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxhat[j] = grow[j] * gam[j];
                        }
                        let mean_d = kernels::sum(&dxhat) / dd;
                        let mean_dh = kernels::dot(&dxhat, h) / dd;
                        for j in 0..d {
                            orow[j] = orow[j] + rstd[i] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                });
                acc(*gamma, &mut |buf| {
                    for (grow, h) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] = buf[j] + grow[j] * h[j];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for grow in gd.chunks(d) {
                        buf.iter_mut().zip(grow).for_each(|(o, &x)| *o = *o + x);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.cols();
                acc(*x, &mut |buf| {
                    for ((grow, yrow), orow) in gd.chunks(d).zip(y.chunks(d)).zip(buf.chunks_mut(d)) {
                        let s = kernels::dot(grow, yrow);
                        for j in 0..d {
                            orow[j] = orow[j] + yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::CausalSoftmax { x, scale } => {
                let y = node.value.data();
                let t = node.value.cols();
                acc(*x, &mut |buf| {
                    for i in 0..t {
                        let grow = &gd[i * t..i * t + i + 1];
                        let yrow = &y[i * t..i * t + i + 1];
                        let s = kernels::dot(grow, yrow);
                        for j in 0..=i {
                            buf[i * t + j] = buf[i * t + j] + *scale * yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.cols();
                acc(*table, &mut |buf| {
                    for (k, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&gd[k * d..(k + 1) * d]).for_each(|(o, &x)| *o = *o + x);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = nodes[logits.0].value.cols();
                let scale = gd[0] / S::lit(*count as f64);
                acc(*logits, &mut |buf| {
                    let mut k = 0;
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        let p = &probs[k * v..(k + 1) * v];
                        let row = &mut buf[i * v..(i + 1) * v];
                        for j in 0..v {
                            row[j] = row[j] + scale * p[j];
                        }
                        row[targets[i]] = row[targets[i]] - scale;
                        k += 1;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |buf| {
                    for (grow, orow) in gd.chunks(len).zip(buf.chunks_mut(c)) {
                        orow[*start..*start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(o, &x)| *o = *o + x);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    acc(p, &mut |buf| {
                        for (grow, orow) in gd.chunks(total).zip(buf.chunks_mut(c)) {
                            orow.iter_mut()
                                .zip(&grow[offset..offset + c])
                                .for_each(|(o, &x)| *o = *o + x);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                acc(*x, &mut |buf| {
                    buf[start * c..start * c + gd.len()]
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(o, &x)| *o = *o + x);
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(p, &mut |buf| {
                        buf.iter_mut()
                            .zip(&gd[offset..offset + n])
                            .for_each(|(o, &x)| *o = *o + x);
                    });
                    offset += n;
                }
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |buf| {
                    for ((o, &g), &m) in buf.iter_mut().zip(gd).zip(mask) {
                        *o = *o + g * m;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o = *o + g0));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph<f64>, shape: &[usize], v: &[f64], rg: bool) -> Var {
        g.leaf(Tensor::from_f64(shape, v).unwrap(), rg).unwrap()
    }

    #[test]
    fn matmul_identity_and_reduction() {
        let mut g = Graph::<f64>::new();
        let a = mat(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 4.0], false);
        let i = mat(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0], false);
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = mat(&mut g, &[1, 2], &[1.0, 2.0], false);
        let ones = mat(&mut g, &[2, 1], &[1.0, 1.0], false);
        let s = g.matmul(row, ones).unwrap();
        assert_eq!(g.value(s).data(), &[3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let x = mat(&mut g, &[1, 3], &[5.0, 5.0, 5.0], false);
        let gamma = mat(&mut g, &[3], &[1.0; 3], false);
        let beta = mat(&mut g, &[3], &[0.0; 3], false);
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = mat(&mut g, &[1, 2], &[1.0, 2.0], false);
        let gamma = mat(&mut g, &[2], &[1.0; 2], false);
        let beta = mat(&mut g, &[2], &[0.0; 2], false);
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        // mean 1.5, variance 0.25: ±0.5/sqrt(0.25 + 1e-5)
        let expected = 0.5 / (0.25f64 + 1e-5).sqrt();
        let out = g.value(y).data();
        assert!((out[0] + expected).abs() < 1e-12 && (out[1] - expected).abs() < 1e-12);
        assert!((out[1] - 0.99998).abs() < 1e-5);
    }

    #[test]
    fn relu_and_uniform_cross_entropy() {
        let mut g = Graph::<f64>::new();
        let x = mat(&mut g, &[3], &[-1.0, 0.0, 2.0], false);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let logits = g.constant(Tensor::zeros(&[2, 8])).unwrap();
        let ce = g.cross_entropy(logits, &[3, 7], &[true, true]).unwrap();
        assert!((g.value(ce).item() - 8f64.ln()).abs() < 1e-12);
        assert!((8f64.ln() - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask() {
        let mut g = Graph::<f32>::new();
        let logits = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        assert!(matches!(
            g.cross_entropy(logits, &[0, 1], &[false, false]),
            Err(TensorError::EmptyLoss)
        ));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let x = mat(&mut g, &[3, 3], &[0.3, 9.0, 9.0, 0.1, 0.2, 9.0, 1.0, 2.0, 3.0], false);
        let y = g.causal_softmax(x, 1.0).unwrap();
        let p = g.value(y).data();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert!(p[i * 3 + j] < 1e-12);
        }
        for i in 0..3 {
            let s: f64 = p[i * 3..i * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_scatters_only_to_looked_up_rows() {
        let mut g = Graph::<f64>::new();
        let table = mat(&mut g, &[4, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], true);
        let e = g.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = g.sum(e).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
        assert!(g.embedding(table, &[4]).is_err());
    }

    #[test]
    fn frozen_leaves_never_get_gradient_buffers() {
        let mut g = Graph::<f32>::new();
        let w = g.leaf(Tensor::ones(&[3, 3]), false).unwrap();
        let x = g.leaf(Tensor::ones(&[2, 3]), true).unwrap();
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(x).is_some());
        // seed, matmul output, x
        assert_eq!(g.grad_allocations(), 3);
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2], f32::MAX)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { op: "scale" })));
    }
}
