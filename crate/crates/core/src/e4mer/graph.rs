//! Reverse-mode differentiation over a tape of fused matrix ops.
//!
//! A [`Graph`] is built once per forward pass. Every op stores what its
//! backward rule needs; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for the parameter leaves that were marked trainable.
//!
//! Batched sequence tensors are laid out as `(batch * tokens) x features`, so
//! the rows of sample `b` are the contiguous block `b * n .. (b + 1) * n`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::{gemm, Tensor};

pub type NodeId = usize;

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: Option<NodeId>, xhat: Tensor, rstd: Vec<f64> },
    ChannelConv { x: NodeId, w: NodeId, b: NodeId, kernel: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, rstd: Vec<f64>, batch_stats: bool },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    ConcatCols(Vec<NodeId>),
    AddPositional { x: NodeId, pos: NodeId },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, n: usize, probs: Vec<f64>, keep: Option<Vec<f64>> },
    Dropout { x: NodeId, keep: Vec<f64> },
    DropPath { x: NodeId, n: usize, keep: Vec<f64> },
    MeanRows { x: NodeId, n: usize },
    Reshape(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor },
    MaskedRmse { preds: Vec<NodeId>, targets: Vec<Tensor>, masks: Vec<Vec<bool>>, count: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `cols x kernel` window matrix of one signal, zero padded for "same" output.
fn im2col(x: &[f64], kernel: usize) -> Vec<f64> {
    let left = (kernel - 1) / 2;
    let len = x.len();
    let mut out = vec![0.0; len * kernel];
    for t in 0..len {
        let row = &mut out[t * kernel..(t + 1) * kernel];
        for (j, slot) in row.iter_mut().enumerate() {
            let src = t + j;
            if src >= left && src - left < len {
                *slot = x[src - left];
            }
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn keep_mask(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { scale }).collect()
}

fn head_block(src: &Tensor, b: usize, h: usize, n: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dh);
    for t in 0..n {
        let row = src.row(b * n + t);
        out.extend_from_slice(&row[h * dh..(h + 1) * dh]);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.nodes[id].value, Tensor::zeros(0, 0))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, index: usize, value: Tensor, trainable: bool) -> NodeId {
        self.push(value, Op::Param(index), trainable)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        let b = &self.value(bias).data;
        assert_eq!(b.len(), value.cols);
        for row in value.data.chunks_mut(b.len()) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push(value, Op::AddBias(a, bias), ng)
    }

    /// `x · w (+ b)`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let value = Tensor::from_vec(src.rows, src.cols, src.data.iter().map(|&v| gelu(v)).collect());
        let ng = self.needs(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: Option<NodeId>) -> NodeId {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            xhat.row_mut(r).iter_mut().zip(row).for_each(|(o, v)| *o = (v - mean) * rs);
        }
        let g = &self.value(gamma).data;
        let bvals = beta.map(|b| &self.value(b).data);
        let mut value = xhat.clone();
        for row in value.data.chunks_mut(cols) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * g[j] + bvals.map_or(0.0, |b| b[j]);
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || beta.is_some_and(|b| self.needs(b));
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Same-padded 1-D convolution of each row of `x` (`batch x len`) with
    /// `w` (`filters x kernel`). Output is `(batch * len) x filters`.
    pub fn channel_conv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (batch, len) = self.value(x).shape();
        let (filters, kernel) = self.value(w).shape();
        let xs = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        let mut value = Tensor::zeros(batch * len, filters);
        value.data.par_chunks_mut(len * filters).enumerate().for_each(|(s, out)| {
            let cols = im2col(&xs[s * len..(s + 1) * len], kernel);
            for row in out.chunks_mut(filters) {
                row.copy_from_slice(bv);
            }
            gemm(len, kernel, filters, &cols, false, wv, true, out, 1.0);
        });
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::ChannelConv { x, w, b, kernel }, ng)
    }

    /// Batch normalization over rows. With `running = None` batch statistics
    /// are used and returned as `(mean, biased var)`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
    ) -> (NodeId, Option<(Vec<f64>, Vec<f64>)>) {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![0.0; cols];
                for row in src.data.chunks(cols) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; cols];
                for row in src.data.chunks(cols) {
                    for j in 0..cols {
                        var[j] += (row[j] - mean[j]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var, true)
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(rows, cols);
        for (o, row) in xhat.data.chunks_mut(cols).zip(src.data.chunks(cols)) {
            for j in 0..cols {
                o[j] = (row[j] - mean[j]) * rstd[j];
            }
        }
        let g = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        let mut value = xhat.clone();
        for row in value.data.chunks_mut(cols) {
            for j in 0..cols {
                row[j] = row[j] * g[j] + bt[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats }, ng);
        (id, batch_stats.then_some((mean, var)))
    }

    /// Max over consecutive groups of `k` rows.
    pub fn max_pool_rows(&mut self, x: NodeId, k: usize) -> NodeId {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        assert_eq!(rows % k, 0, "rows {rows} not divisible by pool {k}");
        let out_rows = rows / k;
        let mut value = Tensor::zeros(out_rows, cols);
        let mut argmax = vec![0usize; out_rows * cols];
        for o in 0..out_rows {
            for j in 0..cols {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for r in o * k..(o + 1) * k {
                    let v = src.data[r * cols + j];
                    if v > best {
                        best = v;
                        at = r * cols + j;
                    }
                }
                value.data[o * cols + j] = best;
                argmax[o * cols + j] = at;
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::MaxPool { x, argmax }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows, rows);
                value.data[r * cols + off..r * cols + off + src.cols].copy_from_slice(src.row(r));
                off += src.cols;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Adds `pos` (`n x d`) to every sample block of `x` (`(b * n) x d`).
    pub fn add_positional(&mut self, x: NodeId, pos: NodeId) -> NodeId {
        let p = self.value(pos);
        let mut value = self.value(x).clone();
        assert_eq!(value.cols, p.cols);
        assert_eq!(value.rows % p.rows, 0);
        for block in value.data.chunks_mut(p.data.len()) {
            block.iter_mut().zip(&p.data).for_each(|(v, pv)| *v += pv);
        }
        let ng = self.needs(x) || self.needs(pos);
        self.push(value, Op::AddPositional { x, pos }, ng)
    }

    /// Multi-head scaled dot-product self-attention over blocks of `n` rows.
    /// Returns the concatenated heads before the output projection.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        n: usize,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> NodeId {
        let (rows, d) = self.value(q).shape();
        assert_eq!(d % heads, 0);
        assert_eq!(rows % n, 0);
        let batch = rows / n;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let keep = match dropout {
            Some((p, rng)) if p > 0.0 => Some(keep_mask(batch * heads * n * n, p, rng)),
            _ => None,
        };
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * n * n];
        let mut value = Tensor::zeros(rows, d);
        value
            .data
            .par_chunks_mut(n * d)
            .zip(probs.par_chunks_mut(heads * n * n))
            .enumerate()
            .for_each(|(b, (out, pb))| {
                for h in 0..heads {
                    let qh = head_block(qv, b, h, n, dh);
                    let kh = head_block(kv, b, h, n, dh);
                    let vh = head_block(vv, b, h, n, dh);
                    let p = &mut pb[h * n * n..(h + 1) * n * n];
                    gemm(n, dh, n, &qh, false, &kh, true, p, 0.0);
                    for row in p.chunks_mut(n) {
                        row.iter_mut().for_each(|s| *s *= scale);
                        softmax_in_place(row);
                    }
                    let mut oh = vec![0.0; n * dh];
                    match &keep {
                        Some(keep) => {
                            let off = (b * heads + h) * n * n;
                            let dropped: Vec<f64> =
                                p.iter().zip(&keep[off..off + n * n]).map(|(a, m)| a * m).collect();
                            gemm(n, n, dh, &dropped, false, &vh, false, &mut oh, 0.0);
                        }
                        None => gemm(n, n, dh, p, false, &vh, false, &mut oh, 0.0),
                    }
                    for t in 0..n {
                        out[t * d + h * dh..t * d + (h + 1) * dh].copy_from_slice(&oh[t * dh..(t + 1) * dh]);
                    }
                }
            });
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(value, Op::Attention { q, k, v, heads, n, probs, keep }, ng)
    }

    pub fn dropout(&mut self, x: NodeId, p: f64, rng: Option<&mut ChaCha8Rng>) -> NodeId {
        match rng {
            Some(rng) if p > 0.0 => {
                let src = self.value(x);
                let keep = keep_mask(src.len(), p, rng);
                let value =
                    Tensor::from_vec(src.rows, src.cols, src.data.iter().zip(&keep).map(|(a, m)| a * m).collect());
                let ng = self.needs(x);
                self.push(value, Op::Dropout { x, keep }, ng)
            }
            _ => x,
        }
    }

    /// Zeroes whole samples (blocks of `n` rows) with probability `p`.
    pub fn drop_path(&mut self, x: NodeId, n: usize, p: f64, rng: Option<&mut ChaCha8Rng>) -> NodeId {
        match rng {
            Some(rng) if p > 0.0 => {
                let src = self.value(x);
                let keep = keep_mask(src.rows / n, p, rng);
                let mut value = src.clone();
                for (b, block) in value.data.chunks_mut(n * src.cols).enumerate() {
                    block.iter_mut().for_each(|v| *v *= keep[b]);
                }
                let ng = self.needs(x);
                self.push(value, Op::DropPath { x, n, keep }, ng)
            }
            _ => x,
        }
    }

    /// Mean over each block of `n` rows: `(b * n) x d -> b x d`.
    pub fn mean_rows(&mut self, x: NodeId, n: usize) -> NodeId {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let batch = rows / n;
        let mut value = Tensor::zeros(batch, cols);
        for b in 0..batch {
            let out = &mut value.data[b * cols..(b + 1) * cols];
            for t in 0..n {
                out.iter_mut().zip(src.row(b * n + t)).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= n as f64);
        }
        let ng = self.needs(x);
        self.push(value, Op::MeanRows { x, n }, ng)
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let value = self.value(x).clone().reshaped(rows, cols);
        let ng = self.needs(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Mean over rows of `-log softmax(logits_row)[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let src = self.value(logits);
        assert_eq!(src.rows, labels.len());
        let mut probs = src.clone();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            loss -= crate::pretext::log_softmax_at(src.row(r), y);
            softmax_in_place(probs.row_mut(r));
        }
        let value = Tensor::scalar(loss / labels.len() as f64);
        let ng = self.needs(logits);
        self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng)
    }

    /// RMSE over the masked cells of several prediction nodes. Each target and
    /// mask is laid out like the flattened data of its prediction.
    pub fn masked_rmse(&mut self, preds: &[NodeId], targets: Vec<Tensor>, masks: Vec<Vec<bool>>) -> NodeId {
        let mut sum = 0.0;
        let mut count = 0usize;
        for ((&p, t), m) in preds.iter().zip(&targets).zip(&masks) {
            let pv = &self.value(p).data;
            assert_eq!(pv.len(), t.len());
            assert_eq!(pv.len(), m.len());
            for i in 0..pv.len() {
                if m[i] {
                    sum += (pv[i] - t.data[i]).powi(2);
                    count += 1;
                }
            }
        }
        let value = Tensor::scalar(if count == 0 { 0.0 } else { (sum / count as f64).sqrt() });
        let ng = preds.iter().any(|&p| self.needs(p));
        self.push(value, Op::MaskedRmse { preds: preds.to_vec(), targets, masks, count }, ng)
    }

    /// Gradients of scalar node `loss` for every trainable parameter leaf,
    /// indexed by parameter index.
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        if !self.needs(loss) {
            return out;
        }
        grads[loss] = Some(Tensor::filled(1, 1, 1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut out);
        }
        out
    }

    fn backward_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>], out: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], id: NodeId| -> Option<usize> {
            if !self.needs(id) {
                return None;
            }
            let (r, c) = self.value(id).shape();
            if grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(r, c));
            }
            Some(id)
        };
        match &node.op {
            Op::Input => {}
            Op::Param(index) => match &mut out[*index] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).shape();
                let n = self.value(*b).cols;
                if let Some(a) = acc(grads, *a) {
                    let ga = grads[a].as_mut().unwrap();
                    gemm(m, n, k, &g.data, false, &self.value(*b).data, true, &mut ga.data, 1.0);
                }
                if let Some(b) = acc(grads, *b) {
                    let gb = grads[b].as_mut().unwrap();
                    gemm(k, m, n, &self.value(*a).data, true, &g.data, false, &mut gb.data, 1.0);
                }
            }
            Op::AddBias(a, b) => {
                if let Some(b) = acc(grads, *b) {
                    let gb = grads[b].as_mut().unwrap();
                    for row in g.data.chunks(g.cols) {
                        gb.data.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                }
                if let Some(a) = acc(grads, *a) {
                    grads[a].as_mut().unwrap().add_assign(&g);
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(id) = acc(grads, id) {
                        grads[id].as_mut().unwrap().add_assign(&g);
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(x) = acc(grads, *x) {
                    let xv = &self.value(x).data;
                    let gx = grads[x].as_mut().unwrap();
                    for i in 0..g.data.len() {
                        gx.data[i] += g.data[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = g.cols;
                let gam = &self.value(*gamma).data;
                if let Some(gi) = acc(grads, *gamma) {
                    let gg = grads[gi].as_mut().unwrap();
                    for (row, xh) in g.data.chunks(cols).zip(xhat.data.chunks(cols)) {
                        for j in 0..cols {
                            gg.data[j] += row[j] * xh[j];
                        }
                    }
                }
                if let Some(bi) = beta.and_then(|b| acc(grads, b)) {
                    let gb = grads[bi].as_mut().unwrap();
                    for row in g.data.chunks(cols) {
                        gb.data.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                }
                if let Some(xi) = acc(grads, *x) {
                    let gx = grads[xi].as_mut().unwrap();
                    for r in 0..g.rows {
                        let dy = g.row(r);
                        let xh = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            let d = dy[j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        let gr = gx.row_mut(r);
                        for j in 0..cols {
                            gr[j] += rstd[r] * (dy[j] * gam[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::ChannelConv { x, w, b, kernel } => {
                let kernel = *kernel;
                let (batch, len) = self.value(*x).shape();
                let filters = g.cols;
                let xs = &self.value(*x).data;
                if let Some(bi) = acc(grads, *b) {
                    let gb = grads[bi].as_mut().unwrap();
                    for row in g.data.chunks(filters) {
                        gb.data.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                }
                if let Some(wi) = acc(grads, *w) {
                    let partial: Vec<Vec<f64>> = (0..batch)
                        .into_par_iter()
                        .map(|s| {
                            let cols = im2col(&xs[s * len..(s + 1) * len], kernel);
                            let mut gw = vec![0.0; filters * kernel];
                            let gs = &g.data[s * len * filters..(s + 1) * len * filters];
                            gemm(filters, len, kernel, gs, true, &cols, false, &mut gw, 0.0);
                            gw
                        })
                        .collect();
                    let gw = grads[wi].as_mut().unwrap();
                    for p in partial {
                        gw.data.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(xi) = acc(grads, *x) {
                    let wv = &self.value(*w).data;
                    let left = (kernel - 1) / 2;
                    let gx = grads[xi].as_mut().unwrap();
                    for s in 0..batch {
                        let gs = &g.data[s * len * filters..(s + 1) * len * filters];
                        let mut dcols = vec![0.0; len * kernel];
                        gemm(len, filters, kernel, gs, false, wv, false, &mut dcols, 0.0);
                        for t in 0..len {
                            for j in 0..kernel {
                                let src = t + j;
                                if src >= left && src - left < len {
                                    gx.data[s * len + src - left] += dcols[t * kernel + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats } => {
                let cols = g.cols;
                let rows = g.rows as f64;
                let gam = &self.value(*gamma).data;
                let mut sum_dy = vec![0.0; cols];
                let mut sum_dy_xhat = vec![0.0; cols];
                for (row, xh) in g.data.chunks(cols).zip(xhat.data.chunks(cols)) {
                    for j in 0..cols {
                        sum_dy[j] += row[j];
                        sum_dy_xhat[j] += row[j] * xh[j];
                    }
                }
                if let Some(gi) = acc(grads, *gamma) {
                    grads[gi].as_mut().unwrap().data.iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += b);
                }
                if let Some(bi) = acc(grads, *beta) {
                    grads[bi].as_mut().unwrap().data.iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += b);
                }
                if let Some(xi) = acc(grads, *x) {
                    let gx = grads[xi].as_mut().unwrap();
                    for ((o, row), xh) in gx.data.chunks_mut(cols).zip(g.data.chunks(cols)).zip(xhat.data.chunks(cols)) {
                        for j in 0..cols {
                            o[j] += if *batch_stats {
                                gam[j] * rstd[j] * (row[j] - sum_dy[j] / rows - xh[j] * sum_dy_xhat[j] / rows)
                            } else {
                                gam[j] * rstd[j] * row[j]
                            };
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(xi) = acc(grads, *x) {
                    let gx = grads[xi].as_mut().unwrap();
                    for (i, &src) in argmax.iter().enumerate() {
                        gx.data[src] += g.data[i];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    if let Some(pi) = acc(grads, p) {
                        let gp = grads[pi].as_mut().unwrap();
                        for r in 0..g.rows {
                            let src = &g.data[r * g.cols + off..r * g.cols + off + pc];
                            gp.row_mut(r).iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    off += pc;
                }
            }
            Op::AddPositional { x, pos } => {
                if let Some(pi) = acc(grads, *pos) {
                    let gp = grads[pi].as_mut().unwrap();
                    let block = gp.data.len();
                    for chunk in g.data.chunks(block) {
                        gp.data.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(xi) = acc(grads, *x) {
                    grads[xi].as_mut().unwrap().add_assign(&g);
                }
            }
            Op::Attention { q, k, v, heads, n, probs, keep } => {
                let (heads, n) = (*heads, *n);
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = qv.shape();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(rows, d);
                let mut dk = Tensor::zeros(rows, d);
                let mut dv = Tensor::zeros(rows, d);
                dq.data
                    .par_chunks_mut(n * d)
                    .zip(dk.data.par_chunks_mut(n * d))
                    .zip(dv.data.par_chunks_mut(n * d))
                    .enumerate()
                    .for_each(|(b, ((dqb, dkb), dvb))| {
                        for h in 0..heads {
                            let qh = head_block(qv, b, h, n, dh);
                            let kh = head_block(kv, b, h, n, dh);
                            let vh = head_block(vv, b, h, n, dh);
                            let doh = head_block(&g, b, h, n, dh);
                            let off = (b * heads + h) * n * n;
                            let p = &probs[off..off + n * n];
                            let mask = keep.as_ref().map(|k| &k[off..off + n * n]);
                            let dropped: Vec<f64> = match mask {
                                Some(m) => p.iter().zip(m).map(|(a, b)| a * b).collect(),
                                None => p.to_vec(),
                            };
                            // dV = P'^T dO
                            let mut dvh = vec![0.0; n * dh];
                            gemm(n, n, dh, &dropped, true, &doh, false, &mut dvh, 0.0);
                            // dP' = dO V^T
                            let mut dp = vec![0.0; n * n];
                            gemm(n, dh, n, &doh, false, &vh, true, &mut dp, 0.0);
                            if let Some(m) = mask {
                                dp.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
                            }
                            // softmax backward, then the 1/sqrt(dh) scale
                            for (drow, prow) in dp.chunks_mut(n).zip(p.chunks(n)) {
                                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                                for (dv, pv) in drow.iter_mut().zip(prow) {
                                    *dv = pv * (*dv - dot) * scale;
                                }
                            }
                            let mut dqh = vec![0.0; n * dh];
                            gemm(n, n, dh, &dp, false, &kh, false, &mut dqh, 0.0);
                            let mut dkh = vec![0.0; n * dh];
                            gemm(n, n, dh, &dp, true, &qh, false, &mut dkh, 0.0);
                            for t in 0..n {
                                let (src, dst) = (t * dh..(t + 1) * dh, t * d + h * dh..t * d + (h + 1) * dh);
                                dqb[dst.clone()].copy_from_slice(&dqh[src.clone()]);
                                dkb[dst.clone()].copy_from_slice(&dkh[src.clone()]);
                                dvb[dst].copy_from_slice(&dvh[src]);
                            }
                        }
                    });
                for (id, delta) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(id) = acc(grads, id) {
                        grads[id].as_mut().unwrap().add_assign(&delta);
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(xi) = acc(grads, *x) {
                    let gx = grads[xi].as_mut().unwrap();
                    for i in 0..g.data.len() {
                        gx.data[i] += g.data[i] * keep[i];
                    }
                }
            }
            Op::DropPath { x, n, keep } => {
                if let Some(xi) = acc(grads, *x) {
                    let gx = grads[xi].as_mut().unwrap();
                    let block = n * g.cols;
                    for (b, (o, gi)) in gx.data.chunks_mut(block).zip(g.data.chunks(block)).enumerate() {
                        o.iter_mut().zip(gi).for_each(|(a, v)| *a += v * keep[b]);
                    }
                }
            }
            Op::MeanRows { x, n } => {
                if let Some(xi) = acc(grads, *x) {
                    let gx = grads[xi].as_mut().unwrap();
                    let cols = g.cols;
                    for r in 0..gx.rows {
                        let src = &g.data[(r / n) * cols..(r / n + 1) * cols];
                        gx.row_mut(r).iter_mut().zip(src).for_each(|(a, b)| *a += b / *n as f64);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(xi) = acc(grads, *x) {
                    let gx = grads[xi].as_mut().unwrap();
                    gx.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(li) = acc(grads, *logits) {
                    let gl = grads[li].as_mut().unwrap();
                    let scale = g.data[0] / labels.len() as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        let p = probs.row(r);
                        let o = gl.row_mut(r);
                        for j in 0..p.len() {
                            o[j] += scale * (p[j] - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            Op::MaskedRmse { preds, targets, masks, count } => {
                let loss = node.value.data[0];
                if *count == 0 || loss == 0.0 {
                    return;
                }
                let scale = g.data[0] / (*count as f64 * loss);
                for ((&p, t), m) in preds.iter().zip(targets).zip(masks) {
                    if let Some(pi) = acc(grads, p) {
                        let pv = &self.value(pi).data;
                        let gp = grads[pi].as_mut().unwrap();
                        for i in 0..pv.len() {
                            if m[i] {
                                gp.data[i] += scale * (pv[i] - t.data[i]);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    /// Central-difference check of `build` w.r.t. each parameter tensor.
    fn check(params: Vec<Tensor>, build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
        let run = |ps: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = ps.iter().enumerate().map(|(i, p)| g.param(i, p.clone(), true)).collect();
            let loss = build(&mut g, &ids);
            (g.value(loss).data[0], g.backward(loss, ps.len()))
        };
        let (_, grads) = run(&params);
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for i in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data[i] += h;
                let mut minus = params.clone();
                minus[pi].data[i] -= h;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let an = grads[pi].as_ref().map_or(0.0, |g| g.data[i]);
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "param {pi}[{i}]: fd {fd} vs analytic {an}");
            }
        }
    }

    /// Reduces any node to a scalar through a fixed random projection.
    fn project(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
        let (r, c) = g.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.input(rand_tensor(c, 3, &mut rng));
        let y = g.matmul(x, w);
        let y = g.reshape(y, r * 3 / 3, 3);
        let labels: Vec<usize> = (0..r).map(|i| i % 3).collect();
        g.cross_entropy(y, &labels)
    }

    #[test]
    fn linear_gelu_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = vec![rand_tensor(4, 5, &mut rng), rand_tensor(5, 6, &mut rng), rand_tensor(1, 6, &mut rng), rand_tensor(1, 6, &mut rng), rand_tensor(1, 6, &mut rng)];
        check(ps, |g, p| {
            let y = g.linear(p[0], p[1], Some(p[2]));
            let y = g.gelu(y);
            let y = g.layer_norm(y, p[3], Some(p[4]));
            project(g, y, 7)
        });
    }

    #[test]
    fn conv_batchnorm_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(2, 12, &mut rng);
        let ps = vec![rand_tensor(3, 4, &mut rng), rand_tensor(1, 3, &mut rng), rand_tensor(1, 3, &mut rng), rand_tensor(1, 3, &mut rng), x];
        check(ps, |g, p| {
            let y = g.channel_conv(p[4], p[0], p[1]);
            let y = g.gelu(y);
            let (y, _) = g.batch_norm(y, p[2], p[3], None);
            let y = g.max_pool_rows(y, 4);
            project(g, y, 8)
        });
    }

    #[test]
    fn attention_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = vec![rand_tensor(6, 4, &mut rng), rand_tensor(6, 4, &mut rng), rand_tensor(6, 4, &mut rng), rand_tensor(3, 4, &mut rng)];
        check(ps, |g, p| {
            let q = g.add_positional(p[0], p[3]);
            let y = g.attention(q, p[1], p[2], 2, 3, None);
            let y = g.concat_cols(&[y, p[0]]);
            let y = g.mean_rows(y, 3);
            project(g, y, 9)
        });
    }

    #[test]
    fn masked_rmse_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = rand_tensor(3, 2, &mut rng);
        let mask = vec![true, false, true, true, false, true];
        let ps = vec![rand_tensor(3, 2, &mut rng)];
        check(ps, move |g, p| g.masked_rmse(&[p[0]], vec![target.clone()], vec![mask.clone()]));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(0, Tensor::filled(2, 2, 0.5), false);
        let b = g.param(1, Tensor::filled(2, 2, 0.5), true);
        let y = g.matmul(a, b);
        let y = g.cross_entropy(y, &[0, 1]);
        let grads = g.backward(y, 2);
        assert!(grads[0].is_none());
        assert!(grads[1].is_some());
    }
}
