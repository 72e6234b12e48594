//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! referenced in place rather than copied; [`Tape::backward`] returns the
//! gradient of a scalar node with respect to every parameter that was read.

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(NodeId),
    Gate { alpha: NodeId, x: NodeId },
    Gather { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    Attention(Box<AttnCache>),
    CrossEntropy { logits: NodeId, targets: Vec<(usize, usize)>, probs: Vec<f64> },
}

#[derive(Debug)]
struct AttnCache {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    /// heads × L × S attention weights.
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients, indexed like the parameter list. Entries for
/// parameters that did not influence the output stay `None`.
#[derive(Debug, Clone, Default)]
pub struct Grads(pub Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, p: usize) -> Option<&Tensor> {
        self.0.get(p).and_then(Option::as_ref)
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: Grads) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (mine, theirs) in self.0.iter_mut().zip(other.0) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(&t),
                (None, Some(t)) => *mine = Some(t),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.iter_mut().flatten() {
            g.scale(s);
        }
    }
}

pub struct Tape<'p> {
    params: &'p [Tensor],
    trainable: Option<&'p [bool]>,
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    /// `trainable`, when given, limits which parameters receive gradients.
    pub fn new(params: &'p [Tensor], trainable: Option<&'p [bool]>) -> Self {
        Self { params, trainable, param_nodes: vec![None; params.len()], nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => &self.params[*p],
            _ => unreachable!("non-param node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, p: usize) -> NodeId {
        if let Some(id) = self.param_nodes[p] {
            return id;
        }
        let rg = self.trainable.map_or(true, |t| t[p]);
        self.nodes.push(Node { value: None, op: Op::Param(p), requires_grad: rg });
        let id = self.nodes.len() - 1;
        self.param_nodes[p] = Some(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(av.rows, bv.cols);
        matmul_acc(av, bv, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1×cols` row to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let bias = self.value(b);
        assert_eq!((1, out.cols), bias.shape(), "bias shape mismatch");
        for r in 0..out.rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias(x, b), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            let u = GELU_C * (*v + 0.044715 * *v * *v * *v);
            *v = 0.5 * *v * (1.0 + u.tanh());
        }
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// `tanh(alpha) * x` for a `1×1` gate.
    pub fn gate(&mut self, alpha: NodeId, x: NodeId) -> NodeId {
        let a = self.value(alpha);
        assert_eq!(a.shape(), (1, 1), "gate must be scalar");
        let t = a.data[0].tanh();
        let mut out = self.value(x).clone();
        out.scale(t);
        let rg = self.rg(alpha) || self.rg(x);
        self.push(out, Op::Gate { alpha, x }, rg)
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        self.push(out, Op::Gather { table, ids }, rg)
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts), rg)
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries `q: L×d`, keys `k: S×d` and values `v: S×d`. Query rows with
    /// no admissible key produce zeros.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool, key_mask: Option<Vec<bool>>) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = qv.shape();
        let s = kv.rows;
        assert_eq!(kv.cols, d);
        assert_eq!(vv.shape(), (s, d));
        assert_eq!(d % heads, 0);
        if let Some(m) = &key_mask {
            assert_eq!(m.len(), s);
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * l * s];
        let mut out = Tensor::zeros(l, d);
        let mut scores = vec![0.0; s];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let qi = &qv.row(i)[off..off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..s {
                    let allowed = (!causal || j <= i) && key_mask.as_ref().map_or(true, |m| m[j]);
                    if !allowed {
                        scores[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let kj = &kv.row(j)[off..off + dh];
                    let mut acc = 0.0;
                    for (a, b) in qi.iter().zip(kj) {
                        acc += a * b;
                    }
                    scores[j] = acc * scale;
                    max = max.max(scores[j]);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let p = &mut probs[(h * l + i) * s..(h * l + i + 1) * s];
                let mut sum = 0.0;
                for j in 0..s {
                    p[j] = if scores[j] == f64::NEG_INFINITY { 0.0 } else { (scores[j] - max).exp() };
                    sum += p[j];
                }
                let orow = &mut out.data[i * d + off..i * d + off + dh];
                for j in 0..s {
                    p[j] /= sum;
                    if p[j] == 0.0 {
                        continue;
                    }
                    let vj = &vv.row(j)[off..off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p[j] * x;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention(Box::new(AttnCache { q, k, v, heads, probs })), rg)
    }

    /// Mean of `-log softmax(logits[row])[target]` over `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<(usize, usize)>) -> NodeId {
        assert!(!targets.is_empty(), "cross entropy needs at least one target");
        let lv = self.value(logits);
        let v = lv.cols;
        let mut probs = vec![0.0; targets.len() * v];
        let mut total = 0.0;
        for (t, &(row, target)) in targets.iter().enumerate() {
            let r = lv.row(row);
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[t * v..(t + 1) * v];
            let mut sum = 0.0;
            for (pi, x) in p.iter_mut().zip(r) {
                *pi = (x - max).exp();
                sum += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= sum;
            }
            total += -(r[target] - max - sum.ln());
        }
        let loss = total / targets.len() as f64;
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs }, rg)
    }

    /// Back-propagates from the scalar node `root`.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param(_) => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        matmul_bt_acc(&g, bv, slot(&mut grads, *a, av));
                    }
                    if self.rg(*b) {
                        matmul_at_acc(av, &g, slot(&mut grads, *b, bv));
                    }
                }
                Op::Add(a, b) => {
                    for n in [*a, *b] {
                        if self.rg(n) {
                            slot(&mut grads, n, self.value(n)).add_assign(&g);
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    if self.rg(*b) {
                        let gb = slot(&mut grads, *b, self.value(*b));
                        for r in 0..g.rows {
                            for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    if self.rg(*x) {
                        slot(&mut grads, *x, self.value(*x)).add_assign(&g);
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let (rows, cols) = g.shape();
                    let gv = &self.value(*gain).data;
                    if self.rg(*gain) {
                        let gg = slot(&mut grads, *gain, self.value(*gain));
                        for r in 0..rows {
                            for c in 0..cols {
                                gg.data[c] += g.data[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    }
                    if self.rg(*bias) {
                        let gb = slot(&mut grads, *bias, self.value(*bias));
                        for r in 0..rows {
                            for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    if self.rg(*x) {
                        let gx = slot(&mut grads, *x, self.value(*x));
                        let mut dxhat = vec![0.0; cols];
                        for r in 0..rows {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..cols {
                                dxhat[c] = g.data[r * cols + c] * gv[c];
                                mean_d += dxhat[c];
                                mean_dx += dxhat[c] * xhat[r * cols + c];
                            }
                            mean_d /= cols as f64;
                            mean_dx /= cols as f64;
                            for c in 0..cols {
                                gx.data[r * cols + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let gx = slot(&mut grads, *x, xv);
                    for ((o, &v), gi) in gx.data.iter_mut().zip(&xv.data).zip(&g.data) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *o += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
                Op::Gate { alpha, x } => {
                    let a = self.value(*alpha).data[0];
                    let t = a.tanh();
                    let xv = self.value(*x);
                    if self.rg(*alpha) {
                        let dot: f64 = g.data.iter().zip(&xv.data).map(|(p, q)| p * q).sum();
                        slot(&mut grads, *alpha, self.value(*alpha)).data[0] += dot * (1.0 - t * t);
                    }
                    if self.rg(*x) {
                        let gx = slot(&mut grads, *x, xv);
                        for (o, gi) in gx.data.iter_mut().zip(&g.data) {
                            *o += t * gi;
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let gt = slot(&mut grads, *table, self.value(*table));
                    for (i, &r) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.rows;
                        if self.rg(p) {
                            let gp = slot(&mut grads, p, pv);
                            for (o, v) in gp.data.iter_mut().zip(&g.data[start * g.cols..(start + n) * g.cols]) {
                                *o += v;
                            }
                        }
                        start += n;
                    }
                }
                Op::Attention(cache) => self.attention_backward(cache, &g, &mut grads),
                Op::CrossEntropy { logits, targets, probs } => {
                    let lv = self.value(*logits);
                    let v = lv.cols;
                    let scale = g.data[0] / targets.len() as f64;
                    let gl = slot(&mut grads, *logits, lv);
                    for (t, &(row, target)) in targets.iter().enumerate() {
                        let p = &probs[t * v..(t + 1) * v];
                        let orow = gl.row_mut(row);
                        for (o, pi) in orow.iter_mut().zip(p) {
                            *o += scale * pi;
                        }
                        orow[target] -= scale;
                    }
                }
            }
        }

        let mut out = Grads(vec![None; self.params.len()]);
        for (p, node) in self.param_nodes.iter().enumerate() {
            if let Some(n) = node {
                out.0[p] = grads[*n].take();
            }
        }
        out
    }

    fn attention_backward(&self, c: &AttnCache, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (l, d) = qv.shape();
        let s = kv.rows;
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(l, d);
        let mut dk = Tensor::zeros(s, d);
        let mut dv = Tensor::zeros(s, d);
        let mut dp = vec![0.0; s];
        for h in 0..c.heads {
            let off = h * dh;
            for i in 0..l {
                let p = &c.probs[(h * l + i) * s..(h * l + i + 1) * s];
                let gi = &g.row(i)[off..off + dh];
                let mut sum_pdp = 0.0;
                for j in 0..s {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &vv.row(j)[off..off + dh];
                    let mut acc = 0.0;
                    for (a, b) in gi.iter().zip(vj) {
                        acc += a * b;
                    }
                    dp[j] = acc;
                    sum_pdp += p[j] * acc;
                    let dvj = &mut dv.data[j * d + off..j * d + off + dh];
                    for (o, x) in dvj.iter_mut().zip(gi) {
                        *o += p[j] * x;
                    }
                }
                let qi = &qv.row(i)[off..off + dh];
                for j in 0..s {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - sum_pdp) * scale;
                    let kj = &kv.row(j)[off..off + dh];
                    let dqi = &mut dq.data[i * d + off..i * d + off + dh];
                    for (o, x) in dqi.iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let dkj = &mut dk.data[j * d + off..j * d + off + dh];
                    for (o, x) in dkj.iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
        for (n, t) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if self.rg(n) {
                slot(grads, n, self.value(n)).add_assign(&t);
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], id: NodeId, like: &Tensor) -> &'g mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(like.rows, like.cols))
}
