//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation in creation order; `backward` walks the
//! tape in reverse and accumulates exact gradients into a [`Gradients`]
//! buffer. Graphs are cheap and short-lived: the trainer builds one per
//! example so memory stays bounded.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
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
    WeightedRowSum {
        x: Var,
        weights: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        norm_a: f64,
        norm_b: f64,
    },
    Sum(Var),
    BceLogits {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    Pick {
        x: Var,
        row: usize,
        col: usize,
    },
    MaskFill {
        x: Var,
        keep: Vec<bool>,
    },
    AdditiveScores {
        p: Var,
        q: Var,
        v: Var,
        th: Matrix,
    },
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of non-parameter nodes produced by [`Graph::backward`].
pub struct NodeGrads {
    grads: Vec<Option<Matrix>>,
}

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// The parameter as a graph node; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(va.rows(), vb.rows());
        gemm(va, false, vb, true, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        assert_eq!(vr.shape(), (1, vx.cols()), "add_row: bias shape");
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(out, Op::AddRow(x, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        });
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Row-wise softmax. Columns with `keep[c] == false` get probability 0.
    pub fn softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Var {
        let vx = self.value(x);
        let mut out = vx.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r), keep);
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    /// Normalises each row to zero mean / unit variance, then applies the
    /// `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        assert_eq!(vg.shape(), (1, cols), "layer_norm: gain shape");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * vg.data()[c] + vb.data()[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row lookup: output row `t` is `table[ids[t]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let mut out = Matrix::zeros(ids.len(), vt.cols());
        for (t, &id) in ids.iter().enumerate() {
            out.row_mut(t).copy_from_slice(vt.row(id));
        }
        let ng = self.ng(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let vx = self.value(x);
        assert!(start < end && end <= vx.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(vx.rows(), end - start);
        for r in 0..vx.rows() {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..end]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + vp.cols()].copy_from_slice(vp.row(r));
            }
            off += vp.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let vx = self.value(x);
        assert!(start < end && end <= vx.rows(), "slice_rows out of range");
        let cols = vx.cols();
        let out = Matrix::from_vec(end - start, cols, vx.data()[start * cols..end * cols].to_vec());
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows: column mismatch");
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// `Σ_r weights[r] · x[r]` as a `1 × cols` row.
    pub fn weighted_row_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let vx = self.value(x);
        assert_eq!(weights.len(), vx.rows(), "weighted_row_sum: weight count");
        let mut out = Matrix::zeros(1, vx.cols());
        for (r, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (o, v) in out.row_mut(0).iter_mut().zip(vx.row(r)) {
                    *o += w * v;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::WeightedRowSum { x, weights }, ng)
    }

    /// Mean over the rows with `keep[r] == true` (all rows when `keep` is None).
    pub fn mean_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Var {
        let rows = self.value(x).rows();
        let weights = match keep {
            None => vec![1.0 / rows as f64; rows],
            Some(k) => {
                assert_eq!(k.len(), rows, "mean_rows: mask length");
                let n = k.iter().filter(|&&b| b).count();
                let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
                k.iter().map(|&b| if b { w } else { 0.0 }).collect()
            }
        };
        self.weighted_row_sum(x, weights)
    }

    /// Cosine similarity of two equally shaped nodes as a `1 × 1` node.
    /// Defined as 0 (with zero gradient) when either norm is 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "cosine: shape mismatch");
        let norm_a = va.sq_norm().sqrt();
        let norm_b = vb.sq_norm().sqrt();
        let dot: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        let c = if norm_a == 0.0 || norm_b == 0.0 {
            0.0
        } else {
            dot / (norm_a * norm_b)
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(Matrix::scalar(c), Op::Cosine { a, b, norm_a, norm_b }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Matrix::scalar(s), Op::Sum(x), ng)
    }

    /// `Σ_i weights[i] · BCE(sigmoid(x_i), targets[i])` over all entries of x.
    pub fn bce_with_logits(&mut self, x: Var, targets: Vec<f64>, weights: Vec<f64>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), targets.len(), "bce: target count");
        assert_eq!(vx.len(), weights.len(), "bce: weight count");
        let loss: f64 = vx
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&z, &t), &w)| w * bce_logit(z, t))
            .sum();
        let ng = self.ng(x);
        self.push(Matrix::scalar(loss), Op::BceLogits { x, targets, weights }, ng)
    }

    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Var {
        let v = self.value(x).get(row, col);
        let ng = self.ng(x);
        self.push(Matrix::scalar(v), Op::Pick { x, row, col }, ng)
    }

    /// Replaces every entry at a position with `keep == false` by `fill`.
    /// `keep` indexes the flattened matrix.
    pub fn mask_fill(&mut self, x: Var, keep: &[bool], fill: f64) -> Var {
        let vx = self.value(x);
        assert_eq!(keep.len(), vx.len(), "mask_fill: mask length");
        let mut out = vx.clone();
        for (o, &k) in out.data_mut().iter_mut().zip(keep) {
            if !k {
                *o = fill;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaskFill { x, keep: keep.to_vec() }, ng)
    }

    /// Additive attention energies `e[t][j] = Σ_k v_k · tanh(p[t][k] + q[j][k])`
    /// for `p: L × d`, `q: M × d`, `v: 1 × d`.
    pub fn additive_scores(&mut self, p: Var, q: Var, v: Var) -> Var {
        let (vp, vq, vv) = (self.value(p), self.value(q), self.value(v));
        let (l, d) = vp.shape();
        let m = vq.rows();
        assert_eq!(vq.cols(), d, "additive_scores: width");
        assert_eq!(vv.shape(), (1, d), "additive_scores: v shape");
        let mut th = Matrix::zeros(l * m, d);
        let mut out = Matrix::zeros(l, m);
        for t in 0..l {
            for j in 0..m {
                let row = th.row_mut(t * m + j);
                let mut e = 0.0;
                for k in 0..d {
                    let h = (vp.get(t, k) + vq.get(j, k)).tanh();
                    row[k] = h;
                    e += vv.data()[k] * h;
                }
                out.set(t, j, e);
            }
        }
        let ng = self.ng(p) || self.ng(q) || self.ng(v);
        self.push(out, Op::AdditiveScores { p, q, v, th }, ng)
    }

    /// Reverse pass from a scalar `loss` (seeded with 1).
    pub fn backward(&self, loss: Var, param_grads: &mut Gradients) -> NodeGrads {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        self.backward_seeded(vec![(loss, Matrix::scalar(1.0))], param_grads)
    }

    /// Reverse pass from arbitrary seed gradients. Parameter gradients are
    /// added into `param_grads`; gradients of other nodes are returned.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Matrix)>, param_grads: &mut Gradients) -> NodeGrads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(v), "seed gradient shape");
            top = top.max(v.0 + 1);
            acc(&mut grads, v, g);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    param_grads.accumulate(*id, &g);
                }
                _ => self.propagate(i, &g, &mut grads),
            }
        }
        NodeGrads { grads }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = self.nodes[i].value.as_ref().expect("op node has value");
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc_gemm(grads, *a, g, false, self.value(*b), true);
                }
                if self.ng(*b) {
                    acc_gemm(grads, *b, self.value(*a), true, g, false);
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.ng(*a) {
                    acc_gemm(grads, *a, g, false, self.value(*b), false);
                }
                if self.ng(*b) {
                    acc_gemm(grads, *b, g, true, self.value(*a), false);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::AddRow(x, row) => {
                if self.ng(*x) {
                    acc(grads, *x, g.clone());
                }
                if self.ng(*row) {
                    acc(grads, *row, column_sums(g));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(grads, *x, g.map(|v| v * c));
            }
            Op::Gelu(x) => {
                let d = g.zip_map(self.value(*x), |gv, v| {
                    let inner = GELU_C * (v + 0.044715 * v * v * v);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
                });
                acc(grads, *x, d);
            }
            Op::Tanh(x) => {
                acc(grads, *x, g.zip_map(out, |gv, y| gv * (1.0 - y * y)));
            }
            Op::Sigmoid(x) => {
                acc(grads, *x, g.zip_map(out, |gv, y| gv * y * (1.0 - y)));
            }
            Op::Softmax(x) => {
                let mut d = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                acc(grads, *x, d);
            }
            Op::LogSoftmax(x) => {
                let mut d = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let total: f64 = gr.iter().sum();
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = gr[c] - yr[c].exp() * total;
                    }
                }
                acc(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                if self.ng(*gamma) {
                    acc(grads, *gamma, column_sums(&g.zip_map(xhat, |a, b| a * b)));
                }
                if self.ng(*beta) {
                    acc(grads, *beta, column_sums(g));
                }
                if self.ng(*x) {
                    let vg = self.value(*gamma);
                    let mut d = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = gr[c] * vg.data()[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        let is = inv_std[r];
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            let dh = gr[c] * vg.data()[c];
                            *o = is / n * (n * dh - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    acc(grads, *x, d);
                }
            }
            Op::Gather { table, ids } => {
                let (rows, cols) = self.value(*table).shape();
                let slot = grads[table.0].get_or_insert_with(|| Matrix::zeros(rows, cols));
                for (t, &id) in ids.iter().enumerate() {
                    for (o, v) in slot.row_mut(id).iter_mut().zip(g.row(t)) {
                        *o += v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.value(*x).shape();
                let slot = grads[x.0].get_or_insert_with(|| Matrix::zeros(rows, cols));
                for r in 0..rows {
                    for (o, v) in slot.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Matrix::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        acc(grads, p, d);
                    }
                    off += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.value(*x).shape();
                let slot = grads[x.0].get_or_insert_with(|| Matrix::zeros(rows, cols));
                let base = start * cols;
                for (o, v) in slot.data_mut()[base..base + g.len()].iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.ng(p) {
                        let d = Matrix::from_vec(pr, cols, g.data()[off * cols..(off + pr) * cols].to_vec());
                        acc(grads, p, d);
                    }
                    off += pr;
                }
            }
            Op::WeightedRowSum { x, weights } => {
                let cols = g.cols();
                let mut d = Matrix::zeros(weights.len(), cols);
                for (r, &w) in weights.iter().enumerate() {
                    for (o, v) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                        *o = w * v;
                    }
                }
                acc(grads, *x, d);
            }
            Op::Cosine { a, b, norm_a, norm_b } => {
                if *norm_a == 0.0 || *norm_b == 0.0 {
                    return;
                }
                let gv = g.item();
                let c = out.item();
                let (va, vb) = (self.value(*a), self.value(*b));
                let nab = norm_a * norm_b;
                if self.ng(*a) {
                    let d = vb.zip_map(va, |bb, aa| gv * (bb / nab - c * aa / (norm_a * norm_a)));
                    acc(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = va.zip_map(vb, |aa, bb| gv * (aa / nab - c * bb / (norm_b * norm_b)));
                    acc(grads, *b, d);
                }
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                acc(grads, *x, Matrix::filled(r, c, g.item()));
            }
            Op::BceLogits { x, targets, weights } => {
                let gv = g.item();
                let vx = self.value(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &w)| gv * w * (sigmoid(z) - t))
                    .collect();
                acc(grads, *x, Matrix::from_vec(vx.rows(), vx.cols(), data));
            }
            Op::Pick { x, row, col } => {
                let (r, c) = self.value(*x).shape();
                let slot = grads[x.0].get_or_insert_with(|| Matrix::zeros(r, c));
                let v = slot.get(*row, *col) + g.item();
                slot.set(*row, *col, v);
            }
            Op::MaskFill { x, keep } => {
                let mut d = g.clone();
                for (o, &k) in d.data_mut().iter_mut().zip(keep) {
                    if !k {
                        *o = 0.0;
                    }
                }
                acc(grads, *x, d);
            }
            Op::AdditiveScores { p, q, v, th } => {
                let (vp, vq, vv) = (self.value(*p), self.value(*q), self.value(*v));
                let (l, d) = vp.shape();
                let m = vq.rows();
                let mut dp = Matrix::zeros(l, d);
                let mut dq = Matrix::zeros(m, d);
                let mut dv = Matrix::zeros(1, d);
                for t in 0..l {
                    for j in 0..m {
                        let gtj = g.get(t, j);
                        if gtj == 0.0 {
                            continue;
                        }
                        let hrow = th.row(t * m + j);
                        for k in 0..d {
                            let h = hrow[k];
                            let dpre = gtj * vv.data()[k] * (1.0 - h * h);
                            dp.data_mut()[t * d + k] += dpre;
                            dq.data_mut()[j * d + k] += dpre;
                            dv.data_mut()[k] += gtj * h;
                        }
                    }
                }
                if self.ng(*p) {
                    acc(grads, *p, dp);
                }
                if self.ng(*q) {
                    acc(grads, *q, dq);
                }
                if self.ng(*v) {
                    acc(grads, *v, dv);
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// `grads[v] += op(a) · op(b)` without a temporary.
fn acc_gemm(grads: &mut [Option<Matrix>], v: Var, a: &Matrix, ta: bool, b: &Matrix, tb: bool) {
    let rows = if ta { a.cols() } else { a.rows() };
    let cols = if tb { b.rows() } else { b.cols() };
    match &mut grads[v.0] {
        Some(existing) => gemm(a, ta, b, tb, existing, 1.0),
        slot @ None => {
            let mut m = Matrix::zeros(rows, cols);
            gemm(a, ta, b, tb, &mut m, 0.0);
            *slot = Some(m);
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `-(t·ln σ(z) + (1-t)·ln(1-σ(z)))`.
pub fn bce_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// In-place softmax of one row; masked entries become exactly 0.
pub fn softmax_in_place(row: &mut [f64], keep: Option<&[bool]>) {
    let kept = |c: usize| keep.is_none_or(|k| k[c]);
    let m = row
        .iter()
        .enumerate()
        .filter(|(c, _)| kept(*c))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (c, v) in row.iter_mut().enumerate() {
        if kept(c) {
            *v = (*v - m).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    if total > 0.0 {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks every parameter of `store` against central differences of `f`.
    fn check_grads(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let mut grads = Gradients::zeros_like(store);
        {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss, &mut grads);
        }
        let eps = 1e-6;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for i in 0..store.get(id).len() {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + eps;
                let up = {
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                store.get_mut(id).data_mut()[i] = orig - eps;
                let down = {
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                store.get_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.get(id).data()[i];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-5 || (numeric - analytic).abs() < 1e-9,
                    "{}[{i}]: analytic {analytic} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    fn store_with(shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        for &(n, r, c) in shapes {
            s.add(n, uniform(&mut rng, r, c, 1.0));
        }
        s
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut s = store_with(&[("a", 3, 4), ("b", 4, 2), ("c", 3, 2), ("bias", 1, 2)]);
        check_grads(&mut s, |g| {
            let p = g.params();
            let (a, b, c, bias) = (
                g.param(p.find("a").unwrap()),
                g.param(p.find("b").unwrap()),
                g.param(p.find("c").unwrap()),
                g.param(p.find("bias").unwrap()),
            );
            let ab = g.matmul(a, b);
            let abc = g.mul(ab, c);
            let t = g.tanh(abc);
            let s1 = g.sigmoid(t);
            let ge = g.gelu(s1);
            let r = g.add_row(ge, bias);
            let nt = g.matmul_nt(r, c);
            let sc = g.scale(nt, 0.7);
            g.sum(sc)
        });
    }

    #[test]
    fn softmax_layernorm_cosine_grads() {
        let mut s = store_with(&[("x", 3, 5), ("g", 1, 5), ("b", 1, 5), ("y", 3, 5)]);
        check_grads(&mut s, |g| {
            let p = g.params();
            let (x, ga, be, y) = (
                g.param(p.find("x").unwrap()),
                g.param(p.find("g").unwrap()),
                g.param(p.find("b").unwrap()),
                g.param(p.find("y").unwrap()),
            );
            let ln = g.layer_norm(x, ga, be);
            let keep = [true, false, true, true, true];
            let sm = g.softmax_rows(ln, Some(&keep));
            let w = g.mul(sm, y);
            let ls = g.log_softmax_rows(w);
            let m1 = g.mean_rows(ls, Some(&[true, true, false]));
            let m2 = g.mean_rows(y, None);
            let cos = g.cosine(m1, m2);
            let pk = g.pick(ls, 2, 3);
            let both = g.concat_cols(&[cos, pk]);
            g.sum(both)
        });
    }

    #[test]
    fn structural_ops_grads() {
        let mut s = store_with(&[("table", 6, 4), ("v", 1, 4), ("q", 2, 4)]);
        check_grads(&mut s, |g| {
            let p = g.params();
            let (table, v, q) = (
                g.param(p.find("table").unwrap()),
                g.param(p.find("v").unwrap()),
                g.param(p.find("q").unwrap()),
            );
            let e = g.gather(table, &[3, 1, 3, 5]);
            let left = g.slice_cols(e, 0, 2);
            let right = g.slice_cols(e, 2, 4);
            let swapped = g.concat_cols(&[right, left]);
            let top = g.slice_rows(swapped, 0, 2);
            let bottom = g.slice_rows(swapped, 2, 4);
            let stacked = g.concat_rows(&[bottom, top, q]);
            let scores = g.additive_scores(stacked, q, v);
            let logits = g.sum(scores);
            let flat = g.concat_cols(&[logits, logits]);
            let masked = g.mask_fill(flat, &[true, false], -1e9);
            let m = g.bce_with_logits(masked, vec![1.0, 0.0], vec![0.5, 0.5]);
            let extra = g.bce_with_logits(scores, vec![0.0; 12], vec![0.1; 12]);
            g.add(m, extra)
        });
    }

    #[test]
    fn cosine_of_zero_vector_is_zero_with_zero_grad() {
        let mut s = ParamStore::new();
        let a = s.add("a", Matrix::zeros(1, 3));
        let b = s.add("b", Matrix::row_vector(vec![1.0, 2.0, 3.0]));
        let mut grads = Gradients::zeros_like(&s);
        let mut g = Graph::new(&s);
        let (va, vb) = (g.param(a), g.param(b));
        let c = g.cosine(va, vb);
        assert_eq!(g.value(c).item(), 0.0);
        g.backward(c, &mut grads);
        assert_eq!(grads.global_norm(), 0.0);
    }

    #[test]
    fn input_gradients_are_reported() {
        let s = ParamStore::new();
        let mut grads = Gradients::zeros_like(&s);
        let mut g = Graph::new(&s);
        let x = g.input(Matrix::row_vector(vec![1.0, 2.0]));
        let k = g.constant(Matrix::row_vector(vec![3.0, 4.0]));
        let y = g.mul(x, k);
        let l = g.sum(y);
        let ng = g.backward(l, &mut grads);
        assert_eq!(ng.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(ng.get(k).is_none());
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut row = vec![1.0, 5.0, -2.0];
        softmax_in_place(&mut row, Some(&[true, false, true]));
        assert_eq!(row[1], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
