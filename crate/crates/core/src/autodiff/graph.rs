//! Define-by-run reverse-mode graph.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use rand::{Rng, RngCore};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout shared by the fused attention op: `n_seq` sequences of
/// `seq_len` rows each, stacked. `key_real[i]` is false for padding rows.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub n_seq: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub key_real: Vec<bool>,
}

impl AttentionLayout {
    /// Query `i` may read key `j` iff `j <= i` and `j` is a real token.
    /// A padding query reads only itself so its softmax stays defined.
    #[inline]
    fn allowed(&self, base: usize, i: usize, j: usize) -> bool {
        j <= i && (j == i || self.key_real[base + j])
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Relu(Var),
    Square(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    ClampMax(Var, T),
    Sum(Var),
    WeightedSum(Var, Vec<T>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Whether stochastic ops (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Graph<'r, T> {
    nodes: Vec<Node<T>>,
    rng: Option<&'r mut dyn RngCore>,
}

impl<T: Scalar> Graph<'static, T> {
    /// Inference graph. Never touches an RNG.
    pub fn eval() -> Self {
        Graph {
            nodes: Vec::new(),
            rng: None,
        }
    }
}

impl<'r, T: Scalar> Graph<'r, T> {
    /// Training graph; dropout masks are drawn from `rng`.
    pub fn train(rng: &'r mut dyn RngCore) -> Self {
        Graph {
            nodes: Vec::new(),
            rng: Some(rng),
        }
    }

    pub fn mode(&self) -> Mode {
        if self.rng.is_some() {
            Mode::Train
        } else {
            Mode::Eval
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present once `backward` has reached the node.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let x = &self.nodes[a.0].value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols() != tb.rows() || tb.shape().len() != 2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, k, n, ta.data(), tb.data(), &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Adds a length-`n` row vector to every row of `x[m×n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        if tr.len() != tx.cols() {
            return Err(Error::shape("add_row", tx.shape(), tr.shape()));
        }
        let n = tx.cols();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, &b) in chunk.iter_mut().zip(tr.data()) {
                *d = *d + b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    /// Elementwise product with a constant buffer of the same length.
    pub fn mul_const(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.len() != factors.len() {
            return Err(Error::shape("mul_const", tx.shape(), &[factors.len()]));
        }
        let data = tx.data().iter().zip(&factors).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst(x, factors), &[x]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// `log σ(x)`, evaluated without overflow for either sign.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::LogSigmoid(x), log_sigmoid)
    }

    /// `min(x, cap)`; gradient is cut where the cap is active.
    pub fn clamp_max(&mut self, x: Var, cap: T) -> Var {
        self.map(x, Op::ClampMax(x, cap), |v| if v > cap { cap } else { v })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let n = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Per-row normalisation to zero mean and unit variance, then `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let tx = &self.nodes[x.0].value;
        let n = tx.cols();
        let (tg, tb) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if tg.len() != n || tb.len() != n {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let inv_n = T::of(1.0 / n as f64);
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + T::of(EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let tx = &self.nodes[x.0].value;
        let mask: Vec<T> = (0..tx.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout(x, mask), &[x]))
    }

    /// Gathers rows of `table[V×d]`; gradients scatter back to those rows only.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let (rows, d) = (tt.rows(), tt.cols());
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(value, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Alias used for learned embedding tables.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Stacks matrices with equal width on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let d = self.nodes[first.0].value.cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols() != d {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / d;
        let value = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Per-row `-log softmax(logits)[target]`, shape `[B]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let (b, c) = (tl.rows(), tl.cols());
        if targets.len() != b {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let mut probs = tl.data().to_vec();
        let mut out = Vec::with_capacity(b);
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index {
                    what: "class target",
                    index: t,
                    size: c,
                });
            }
            let row = &mut probs[r * c..(r + 1) * c];
            let lse = log_sum_exp(row);
            out.push(lse - row[t]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::vector(out);
        Ok(self.push(
            value,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean cross-entropy over the batch.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let rows = self.cross_entropy_rows(logits, targets)?;
        Ok(self.mean(rows))
    }

    /// `(1/|S|) Σ (pred - target)²` over every element.
    pub fn mse_mean(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target).map_err(|_| {
            Error::shape("mse_mean", self.shape(pred), self.shape(target))
        })?;
        let sq = self.square(diff);
        Ok(self.mean(sq))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s = self.sum(x);
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.len() != weights.len() {
            return Err(Error::shape("weighted_sum", tx.shape(), &[weights.len()]));
        }
        let s = tx.data().iter().zip(&weights).map(|(&a, &w)| a * w).sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights), &[x]))
    }

    /// Masked multi-head scaled dot-product attention over stacked sequences.
    /// `q`, `k`, `v` are `(n_seq·seq_len) × d`; heads split `d` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (tq, tk, tv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::shape("attention", tq.shape(), tk.shape()));
        }
        let d = tq.cols();
        let (s, l, h) = (layout.n_seq, layout.seq_len, layout.n_heads);
        if tq.rows() != s * l || layout.key_real.len() != s * l {
            return Err(Error::shape("attention", tq.shape(), &[s, l]));
        }
        if h == 0 || d % h != 0 {
            return Err(Error::config(format!("{d} columns not divisible into {h} heads")));
        }
        let dh = d / h;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); s * h * l * l];
        let mut out = vec![T::zero(); s * l * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = vec![T::zero(); l];
        for seq in 0..s {
            let base = seq * l;
            for head in 0..h {
                let off = head * dh;
                for i in 0..l {
                    let qi = &qd[(base + i) * d + off..(base + i) * d + off + dh];
                    let mut max = T::neg_infinity();
                    for (j, sc) in scores.iter_mut().enumerate() {
                        if layout.allowed(base, i, j) {
                            let kj = &kd[(base + j) * d + off..(base + j) * d + off + dh];
                            let dot = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                            *sc = dot;
                            if dot > max {
                                max = dot;
                            }
                        }
                    }
                    let p = &mut probs[((seq * h + head) * l + i) * l..][..l];
                    let mut z = T::zero();
                    for j in 0..l {
                        if layout.allowed(base, i, j) {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            z = z + e;
                        }
                    }
                    let o = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                    for j in 0..l {
                        if p[j] != T::zero() {
                            p[j] = p[j] / z;
                            let vj = &vd[(base + j) * d + off..(base + j) * d + off + dh];
                            for (oc, &vc) in o.iter_mut().zip(vj) {
                                *oc = *oc + p[j] * vc;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(tq.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Populates gradients of the scalar `root` on every reachable node that
    /// requires them. Repeated calls accumulate; see [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&self.nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g) {
                        *e = *e + v;
                    }
                }
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }
}

fn acc<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            if let Some(ga) = acc(nodes, grads, *a) {
                T::gemm(false, true, m, n, k, g, tb.data(), ga, true);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                T::gemm(true, false, k, m, n, ta.data(), g, gb, true);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = acc(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y);
            }
        }
        Op::AddRow(x, row) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }
            let n = out.cols();
            if let Some(gr) = acc(nodes, grads, *row) {
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
        Op::MulConst(x, f) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((a, &b), &c) in gx.iter_mut().zip(g).zip(f) {
                    *a = *a + b * c;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b * *c);
            }
        }
        Op::Relu(x) => {
            let xin = nodes[x.0].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((a, &b), &v) in gx.iter_mut().zip(g).zip(xin) {
                    if v > T::zero() {
                        *a = *a + b;
                    }
                }
            }
        }
        Op::Square(x) => {
            let xin = nodes[x.0].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                let two = T::of(2.0);
                for ((a, &b), &v) in gx.iter_mut().zip(g).zip(xin) {
                    *a = *a + two * v * b;
                }
            }
        }
        Op::LogSigmoid(x) => {
            let xin = nodes[x.0].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                // d/dx log σ(x) = σ(-x)
                for ((a, &b), &v) in gx.iter_mut().zip(g).zip(xin) {
                    *a = *a + b * sigmoid(-v);
                }
            }
        }
        Op::ClampMax(x, cap) => {
            let xin = nodes[x.0].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((a, &b), &v) in gx.iter_mut().zip(g).zip(xin) {
                    if v <= *cap {
                        *a = *a + b;
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let n = out.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((gr, yr), dst) in g.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((d, &gy), &y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = *d + y * (gy - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = out.cols();
            let gv = nodes[gain.0].value.data();
            if let Some(gg) = acc(nodes, grads, *gain) {
                for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for ((a, &b), &h) in gg.iter_mut().zip(gr).zip(hr) {
                        *a = *a + b * h;
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for gr in g.chunks(n) {
                    gb.iter_mut().zip(gr).for_each(|(a, &b)| *a = *a + b);
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let inv_n = T::of(1.0 / n as f64);
                let mut dxhat = vec![T::zero(); n];
                for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    for c in 0..n {
                        dxhat[c] = gr[c] * gv[c];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() * inv_n;
                    let m2 = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                    let dst = &mut gx[r * n..(r + 1) * n];
                    for c in 0..n {
                        dst[c] = dst[c] + rstd[r] * (dxhat[c] - m1 - hr[c] * m2);
                    }
                }
            }
        }
        Op::Dropout(x, mask) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((a, &b), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *a = *a + b * m;
                }
            }
        }
        Op::Gather(table, ids) => {
            let d = out.cols();
            if let Some(gt) = acc(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                if let Some(gp) = acc(nodes, grads, *p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(a, &b)| *a = *a + b);
                }
                offset += len;
            }
        }
        Op::CrossEntropyRows {
            logits,
            targets,
            probs,
        } => {
            let c = nodes[logits.0].value.cols();
            if let Some(gl) = acc(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let dst = &mut gl[r * c..(r + 1) * c];
                    for (j, d) in dst.iter_mut().enumerate() {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        *d = *d + g[r] * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a = *a + g[0]);
            }
        }
        Op::WeightedSum(x, w) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(w).for_each(|(a, &b)| *a = *a + g[0] * b);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
        } => attention_backward(nodes, grads, g, *q, *k, *v, layout, probs),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    q: Var,
    k: Var,
    v: Var,
    layout: &AttentionLayout,
    probs: &[T],
) {
    let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let d = tq.cols();
    let (s, l, h) = (layout.n_seq, layout.seq_len, layout.n_heads);
    let dh = d / h;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); tq.len()];
    let mut dk = vec![T::zero(); tk.len()];
    let mut dv = vec![T::zero(); tv.len()];
    let mut dp = vec![T::zero(); l];
    for seq in 0..s {
        let base = seq * l;
        for head in 0..h {
            let off = head * dh;
            for i in 0..l {
                let p = &probs[((seq * h + head) * l + i) * l..][..l];
                let go = &g[(base + i) * d + off..][..dh];
                let mut dot = T::zero();
                for j in 0..l {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &tv.data()[(base + j) * d + off..][..dh];
                    dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                    dot = dot + p[j] * dp[j];
                    let dvj = &mut dv[(base + j) * d + off..][..dh];
                    dvj.iter_mut().zip(go).for_each(|(a, &b)| *a = *a + p[j] * b);
                }
                let qi = &tq.data()[(base + i) * d + off..][..dh];
                for j in 0..l {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = &tk.data()[(base + j) * d + off..][..dh];
                    let dqi = &mut dq[(base + i) * d + off..][..dh];
                    dqi.iter_mut().zip(kj).for_each(|(a, &b)| *a = *a + ds * b);
                    let dkj = &mut dk[(base + j) * d + off..][..dh];
                    dkj.iter_mut().zip(qi).for_each(|(a, &b)| *a = *a + ds * b);
                }
            }
        }
    }
    for (var, local) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(gv) = acc(nodes, grads, var) {
            gv.iter_mut().zip(local).for_each(|(a, b)| *a = *a + b);
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::infinity() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
