//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Calling [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients into the parameters of a [`ParamStore`]. Graphs are cheap to
//! build and are rebuilt for every optimization step.

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::tensor::{gemm, softmax_in_place, Layout, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    SoftmaxRows(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    GradReverse(Var, f64),
    ProtoDist(Var, Tensor),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    LogLoss {
        p: Var,
        positive: bool,
        clamped: Vec<bool>,
    },
    WeightedSum(Var, Tensor),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Epsilon used to clamp probabilities inside log losses.
pub const LOG_CLAMP_EPS: f64 = 1e-7;

/// Batch-norm epsilon added to the variance.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    clamp_events: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Number of probabilities clamped by log losses on this tape.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used by tests and the gradient checker).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::dim("add_row", ta.shape_str(), tb.shape_str()));
        }
        let mut out = ta.clone();
        out.clear_grad();
        let b = tb.data();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                self.value(a).shape_str(),
                self.value(b).shape_str(),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    /// Sum of `terms[i].1 * terms[i].0` over scalar nodes.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, k) in terms {
            let s = self.scale(v, k);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        Ok(acc.unwrap_or_else(|| self.constant(Tensor::scalar(0.0))))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let out = super::tensor::leaky_relu(self.value(a), alpha);
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, alpha), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = super::tensor::softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Train-mode batch normalization. Returns the output and the batch
    /// mean and (biased) variance per column so the caller can update
    /// running moments.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let tx = self.value(x);
        let (n, d) = tx.shape();
        if n < 2 {
            return Err(Error::DegenerateBatch { rows: n });
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != (1, d) || tb.shape() != (1, d) {
            return Err(Error::dim("batch_norm", tx.shape_str(), tg.shape_str()));
        }
        let mut mean = vec![0.0; d];
        for row in tx.iter_rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in tx.iter_rows() {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * d];
        let mut out = Tensor::zeros(n, d);
        let (g, b) = (tg.data(), tb.data());
        for (i, row) in tx.iter_rows().enumerate() {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out.data_mut()[i * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(Error::dim(
                "slice_cols",
                ta.shape_str(),
                format!("[{start}, {})", start + len),
            ));
        }
        let out = ta.slice_cols(start, len);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::dim(
                    "concat_cols",
                    rows,
                    self.value(p).shape_str(),
                ));
            }
            cols += self.shape(p).1;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let w = t.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.rows() {
            return Err(Error::dim(
                "slice_rows",
                ta.shape_str(),
                format!("[{start}, {})", start + len),
            ));
        }
        let cols = ta.cols();
        let out = Tensor::from_vec(len, cols, ta.data()[start * cols..(start + len) * cols].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::dim("gather_rows", ta.shape_str(), format!("row {bad}")));
        }
        let out = ta.gather_rows(idx);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Var {
        let mut out = self.value(a).clone();
        out.clear_grad();
        let rg = self.rg(a);
        self.push(out, Op::GradReverse(a, lambda), rg)
    }

    /// `N x C` matrix of Euclidean distances from each row of `a` to each
    /// (constant) row of `protos`.
    pub fn proto_dist(&mut self, a: Var, protos: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols() != protos.cols() {
            return Err(Error::dim("proto_dist", ta.shape_str(), protos.shape_str()));
        }
        let mut out = Tensor::zeros(ta.rows(), protos.rows());
        for (i, row) in ta.iter_rows().enumerate() {
            for (c, p) in protos.iter_rows().enumerate() {
                out.set(i, c, super::tensor::squared_dist(row, p).sqrt());
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::ProtoDist(a, protos.clone()), rg))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = t.shape();
        if labels.len() != n {
            return Err(Error::dim("cross_entropy", t.shape_str(), format!("{} labels", labels.len())));
        }
        if n == 0 {
            return Err(Error::EmptyDomain("cross_entropy batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label {
                label: bad,
                classes: c,
            });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            let logits_row = t.row(r);
            let max = logits_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits_row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - logits_row[y];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of `-ln p` (positive) or `-ln(1 - p)` over all entries, with
    /// probabilities clamped to `[eps, 1 - eps]`. Clamped entries pass no
    /// gradient and are counted in [`Graph::clamp_events`].
    pub fn log_loss(&mut self, p: Var, positive: bool) -> Result<Var> {
        let t = self.value(p);
        if t.is_empty() {
            return Err(Error::EmptyDomain("log_loss input"));
        }
        let n = t.len();
        let mut clamped = Vec::with_capacity(n);
        let mut loss = 0.0;
        for &v in t.data() {
            let q = if positive { v } else { 1.0 - v };
            let was = !(LOG_CLAMP_EPS..=1.0 - LOG_CLAMP_EPS).contains(&q);
            clamped.push(was);
            loss -= q.clamp(LOG_CLAMP_EPS, 1.0 - LOG_CLAMP_EPS).ln();
        }
        self.clamp_events += clamped.iter().filter(|&&c| c).count();
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::LogLoss {
                p,
                positive,
                clamped,
            },
            rg,
        ))
    }

    /// `sum_ij w_ij * a_ij` for a constant weight matrix.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let t = self.value(a);
        if t.shape() != weights.shape() {
            return Err(Error::dim("weighted_sum", t.shape_str(), weights.shape_str()));
        }
        let s = t.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), rg))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// (None where no gradient flowed).
    pub fn gradients(&self, root: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.shape(root) != (1, 1) {
            return Err(Error::dim("backward", self.value(root).shape_str(), "1x1"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// Reverse pass that accumulates parameter gradients into `store`.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(root)?;
        for (&id, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                let slot = store.get_mut(id).tensor.grad_mut();
                for (s, &x) in slot.iter_mut().zip(g) {
                    *s += x;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |s| {
                    gemm(m, n, k, 1.0, g, Layout::Normal, tb.data(), Layout::Transposed, 1.0, s)
                });
                acc(*b, &mut |s| {
                    gemm(k, m, n, 1.0, ta.data(), Layout::Transposed, g, Layout::Normal, 1.0, s)
                });
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                acc(*a, &mut |s| {
                    gemm(m, n, k, 1.0, g, Layout::Normal, tb.data(), Layout::Normal, 1.0, s)
                });
                acc(*b, &mut |s| {
                    gemm(n, m, k, 1.0, g, Layout::Transposed, ta.data(), Layout::Normal, 1.0, s)
                });
            }
            Op::AddRow(a, b) => {
                let cols = self.shape(*b).1;
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for row in g.chunks_exact(cols) {
                        add_into(s, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * tb[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * ta[j];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    s[j] += k * g[j];
                }
            }),
            Op::LeakyRelu(a, alpha) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += if x[j] > 0.0 { g[j] } else { alpha * g[j] };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                acc(*a, &mut |s| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            s[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = self.shape(*x);
                let gm = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; d];
                let mut sum_dy_xhat = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        sum_dy[j] += g[i * d + j];
                        sum_dy_xhat[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
                acc(*gamma, &mut |s| add_into(s, &sum_dy_xhat));
                acc(*beta, &mut |s| add_into(s, &sum_dy));
                acc(*x, &mut |s| {
                    let nf = n as f64;
                    for i in 0..n {
                        for j in 0..d {
                            let k = i * d + j;
                            s[k] += gm[j] * inv_std[j] / nf
                                * (nf * g[k] - sum_dy[j] - xhat[k] * sum_dy_xhat[j]);
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let w = node.value.cols();
                acc(*a, &mut |s| {
                    for r in 0..rows {
                        add_into(&mut s[r * cols + start..r * cols + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    acc(*p, &mut |s| {
                        for r in 0..rows {
                            add_into(&mut s[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = node.value.cols();
                acc(*a, &mut |s| add_into(&mut s[start * cols..start * cols + g.len()], g));
            }
            Op::GatherRows(a, idx) => {
                let cols = node.value.cols();
                acc(*a, &mut |s| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut s[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::GradReverse(a, lambda) => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    s[j] -= lambda * g[j];
                }
            }),
            Op::ProtoDist(a, protos) => {
                let ta = self.value(*a);
                let c = protos.rows();
                let d = ta.cols();
                let dist = &node.value;
                acc(*a, &mut |s| {
                    for i in 0..ta.rows() {
                        let x = ta.row(i);
                        for k in 0..c {
                            let dk = dist.get(i, k);
                            if dk == 0.0 {
                                continue;
                            }
                            let coef = g[i * c + k] / dk;
                            let p = protos.row(k);
                            for j in 0..d {
                                s[i * d + j] += coef * (x[j] - p[j]);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits).1;
                let n = labels.len() as f64;
                acc(*logits, &mut |s| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == y { 1.0 } else { 0.0 };
                            s[r * c + j] += g[0] * (probs[r * c + j] - ind) / n;
                        }
                    }
                });
            }
            Op::LogLoss {
                p,
                positive,
                clamped,
            } => {
                let tp = self.value(*p).data();
                let n = tp.len() as f64;
                acc(*p, &mut |s| {
                    for j in 0..s.len() {
                        if clamped[j] {
                            continue;
                        }
                        s[j] += if *positive {
                            -g[0] / (tp[j] * n)
                        } else {
                            g[0] / ((1.0 - tp[j]) * n)
                        };
                    }
                });
            }
            Op::WeightedSum(a, w) => acc(*a, &mut |s| {
                for (sj, &wj) in s.iter_mut().zip(w.data()) {
                    *sj += g[0] * wj;
                }
            }),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn leaky_relu_backward_uses_alpha_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(t(&[&[2.0, -1.0, 0.0]]));
        let y = g.leaky_relu(x, 0.01);
        let w = g.weighted_sum(y, t(&[&[1.0, 1.0, 1.0]])).unwrap();
        let grads = g.gradients(w).unwrap();
        assert_eq!(grads[x.0].as_ref().unwrap(), &vec![1.0, 0.01, 0.01]);
    }

    #[test]
    fn batch_norm_two_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1.0], &[3.0]]));
        let gamma = g.constant(Tensor::filled(1, 1, 1.0));
        let beta = g.constant(Tensor::zeros(1, 1));
        let (y, _, _) = g.batch_norm_train(x, gamma, beta).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + v[1]).abs() < 1e-12);
        let var = (v[0] * v[0] + v[1] * v[1]) / 2.0;
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_constant_column_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[5.0], &[5.0], &[5.0]]));
        let gamma = g.constant(Tensor::filled(1, 1, 1.0));
        let beta = g.constant(Tensor::zeros(1, 1));
        let (y, _, _) = g.batch_norm_train(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_single_row_rejected() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[5.0, 1.0]]));
        let gamma = g.constant(Tensor::filled(1, 2, 1.0));
        let beta = g.constant(Tensor::zeros(1, 2));
        assert!(matches!(
            g.batch_norm_train(x, gamma, beta),
            Err(Error::DegenerateBatch { rows: 1 })
        ));
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(2, 3));
        let l = g.cross_entropy(uniform, &[0, 2]).unwrap();
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-12);

        let sure = g.constant(t(&[&[100.0, -100.0, -100.0]]));
        let l = g.cross_entropy(sure, &[0]).unwrap();
        assert!(g.scalar(l) < 1e-6);

        let bad = g.cross_entropy(uniform, &[5, 0]).unwrap_err();
        assert!(matches!(bad, Error::Label { label: 5, classes: 3 }));
    }

    #[test]
    fn grad_reverse_negates() {
        let mut g = Graph::new();
        let x = g.variable(t(&[&[1.0, 2.0]]));
        let r = g.grad_reverse(x, 1.0);
        let s = g.weighted_sum(r, t(&[&[3.0, -4.0]])).unwrap();
        let grads = g.gradients(s).unwrap();
        assert_eq!(grads[x.0].as_ref().unwrap(), &vec![-3.0, 4.0]);
        assert_eq!(g.value(r).data(), &[1.0, 2.0]);
    }

    #[test]
    fn proto_dist_zero_distance_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.variable(t(&[&[1.0, 1.0]]));
        let protos = t(&[&[1.0, 1.0], &[4.0, 5.0]]);
        let d = g.proto_dist(x, &protos).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 5.0]);
        let s = g.weighted_sum(d, t(&[&[1.0, 0.0]])).unwrap();
        let grads = g.gradients(s).unwrap();
        assert_eq!(grads[x.0].as_ref().unwrap(), &vec![0.0, 0.0]);
    }

    #[test]
    fn log_loss_clamps() {
        let mut g = Graph::new();
        let p = g.variable(t(&[&[1.0]]));
        let l = g.log_loss(p, true).unwrap();
        assert_eq!(g.clamp_events(), 1);
        assert!(g.scalar(l) < 1e-6);
        let l2 = g.log_loss(p, false).unwrap();
        assert_eq!(g.clamp_events(), 2);
        assert!((g.scalar(l2) + LOG_CLAMP_EPS.ln()).abs() < 1e-9);
    }
}
