//! Tape-based reverse-mode automatic differentiation over [`Mat`].
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Parameters
//! are pulled in from a [`ParamStore`] as leaves; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for every node that needs one.
//! Attention, layer normalisation and the losses are fused ops with
//! hand-written backward passes.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{exp, ln, sqrt, tanh};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn_acc, norm, Mat};
use crate::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Only parameters in trainable groups.
    Trainable,
    /// Every parameter, regardless of freeze flags.
    All,
    /// Nothing; forward evaluation only.
    None,
}

/// Attention masking pattern. `Diagonal` makes every row attend to itself
/// only, which encodes each row as an independent length-1 sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    None,
    Causal,
    KeyValid(Vec<bool>),
    Diagonal,
}

impl Mask {
    #[inline]
    fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::KeyValid(valid) => valid[j],
            Mask::Diagonal => i == j,
        }
    }
}

/// Probability clamp used by [`Graph::bce_from_cosine`].
pub const PROB_EPS: f64 = 1e-7;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    CosineRows(Var, Var),
    BceFromCosine {
        cos: Var,
        labels: Vec<f64>,
        h: Vec<f64>,
        clamped: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    mode: GradMode,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Mat>>,
    param_nodes: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.node_grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.param_nodes
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.node_grads[v.0].as_ref())
    }

    /// Per-parameter gradients indexed by `ParamId`.
    pub fn into_param_grads(mut self) -> Vec<Option<Mat>> {
        self.param_nodes
            .iter()
            .map(|v| v.and_then(|v| self.node_grads[v.0].take()))
            .collect()
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, mode: GradMode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is tracked (used by checks on input sensitivity).
    pub fn input_with_grad(&mut self, value: Mat) -> Var {
        let ng = self.mode != GradMode::None;
        self.push(value, Op::Leaf, ng)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let needs = match self.mode {
            GradMode::All => true,
            GradMode::Trainable => self.store.is_trainable(id),
            GradMode::None => false,
        };
        let v = self.push(self.store.value(id).clone(), Op::Param, needs);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.rows {
            bail!(Shape, "matmul {:?} x {:?}", av.shape(), bv.shape());
        }
        let out = matmul(av, bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.cols {
            bail!(Shape, "matmul_nt {:?} x {:?}^T", av.shape(), bv.shape());
        }
        let out = matmul_nt(av, bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            bail!(Shape, "add {:?} + {:?}", av.shape(), bv.shape());
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows != 1 || rv.cols != av.cols {
            bail!(Shape, "add_row {:?} + {:?}", av.shape(), rv.shape());
        }
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Mat {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().map(|&x| gelu(x)).collect(),
        };
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalisation with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let d = xv.cols;
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            bail!(Shape, "layer_norm over {d} columns");
        }
        let mut xhat = Mat::zeros(xv.rows, d);
        let mut out = Mat::zeros(xv.rows, d);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / sqrt(var + LN_EPS);
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.data[r * d + c] = h;
                out.data[r * d + c] = h * gv.data[c] + bv.data[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention. `q` is `n x d`, `k` and `v`
    /// are `m x d`; heads split the columns evenly and the logits are scaled
    /// by `1/sqrt(d / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &Mask) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        if heads == 0 || d % heads != 0 || kv.cols != d || vv.cols != d || kv.rows != vv.rows {
            bail!(
                Shape,
                "attention q{:?} k{:?} v{:?} heads {heads}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            );
        }
        let (n, m) = (qv.rows, kv.rows);
        match mask {
            Mask::Causal | Mask::Diagonal if n != m => {
                bail!(Shape, "{mask:?} mask needs square attention, got {n}x{m}")
            }
            Mask::KeyValid(valid) if valid.len() != m => {
                bail!(Shape, "key mask of length {} for {m} keys", valid.len())
            }
            _ => {}
        }
        if let Mask::Diagonal = mask {
            // every row's softmax has a single entry equal to one
            return Ok(v);
        }
        let probs = attention_probs(qv, kv, heads, mask);
        let dh = d / heads;
        let mut out = Mat::zeros(n, d);
        for (h, p) in probs.iter().enumerate() {
            let c0 = h * dh;
            for i in 0..n {
                let prow = p.row(i);
                let orow = &mut out.data[i * d + c0..i * d + c0 + dh];
                for (j, &pij) in prow.iter().enumerate() {
                    if pij == 0.0 {
                        continue;
                    }
                    let vrow = &vv.data[j * d + c0..j * d + c0 + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += pij * x;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Row lookup: `out[r] = table[idx[r]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows) {
            bail!(Shape, "gather index {bad} out of {} rows", tv.rows);
        }
        let out = tv.select_rows(idx);
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows) {
            bail!(Shape, "row {bad} out of {} rows", xv.rows);
        }
        let out = xv.select_rows(idx);
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            bail!(Shape, "concat of nothing");
        };
        let cols = self.value(*first).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols != cols {
                bail!(Shape, "concat rows with {} vs {cols} columns", pv.cols);
            }
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Mat { rows, cols, data }, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Row-wise cosine similarity, `n x 1`. Zero-norm rows are an error.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            bail!(Shape, "cosine {:?} vs {:?}", av.shape(), bv.shape());
        }
        let mut out = Mat::zeros(av.rows, 1);
        for r in 0..av.rows {
            let (x, y) = (av.row(r), bv.row(r));
            let (nx, ny) = (norm(x), norm(y));
            if nx == 0.0 || ny == 0.0 {
                bail!(Invalid, "cosine similarity of a zero vector (row {r})");
            }
            out.data[r] = dot(x, y) / (nx * ny);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::CosineRows(a, b), ng))
    }

    /// Mean binary cross-entropy of `H = clamp((1 + cos) / 2)` against labels.
    pub fn bce_from_cosine(&mut self, cos: Var, labels: &[f64]) -> Result<Var> {
        let cv = self.value(cos);
        if cv.cols != 1 || cv.rows != labels.len() || labels.is_empty() {
            bail!(Shape, "bce over {:?} with {} labels", cv.shape(), labels.len());
        }
        let mut h = Vec::with_capacity(labels.len());
        let mut clamped = Vec::with_capacity(labels.len());
        let mut total = 0.0;
        for (&c, &y) in cv.data.iter().zip(labels) {
            let raw = 0.5 * (1.0 + c);
            let hv = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            clamped.push(hv != raw);
            total += -y * ln(hv) - (1.0 - y) * ln(1.0 - hv);
            h.push(hv);
        }
        let out = Mat::scalar(total / labels.len() as f64);
        let ng = self.ng(cos);
        Ok(self.push(
            out,
            Op::BceFromCosine {
                cos,
                labels: labels.to_vec(),
                h,
                clamped,
            },
            ng,
        ))
    }

    /// Summed softmax cross-entropy over rows that have a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows != targets.len() {
            bail!(Shape, "{} targets for {} rows", targets.len(), lv.rows);
        }
        let mut probs = Mat::zeros(lv.rows, lv.cols);
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for &x in row {
                s += exp(x - m);
            }
            let lse = m + ln(s);
            for (c, &x) in row.iter().enumerate() {
                probs.data[r * lv.cols + c] = exp(x - lse);
            }
            if let Some(t) = *t {
                if t >= lv.cols {
                    bail!(Shape, "target {t} out of {} classes", lv.cols);
                }
                total += lse - row[t];
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Mat::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `x * W + b` for a `1 x out` bias.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = self.param(w);
        let bv = self.param(b);
        let h = self.matmul(x, wv)?;
        self.add_row(h, bv)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let lv = &self.nodes[loss.0].value;
        debug_assert_eq!(lv.shape(), (1, 1), "backward from a non-scalar");
        grads[loss.0] = Some(Mat::filled(lv.rows, lv.cols, 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only leaves keep meaningful gradients for callers, but intermediate
        // ones are left in place for `Gradients::wrt`.
        Gradients {
            node_grads: grads,
            param_nodes: self.param_vars.clone(),
        }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Mat>], v: Var, f: impl FnOnce(&mut Mat)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let val = &self.nodes[v.0].value;
        let slot = grads[v.0].get_or_insert_with(|| Mat::zeros(val.rows, val.cols));
        f(slot);
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, matmul_nt(g, bv));
                }
                self.acc_with(grads, *b, |gb| matmul_tn_acc(av, g, gb));
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, matmul(g, bv));
                }
                // d(b) = g^T a
                self.acc_with(grads, *b, |gb| matmul_tn_acc(g, av, gb));
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                self.acc_with(grads, *row, |gr| {
                    for r in 0..g.rows {
                        for (o, x) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::Gelu(a) => {
                let av = self.value(*a);
                let data = av
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&x, &gy)| gy * gelu_grad(x))
                    .collect();
                self.acc(
                    grads,
                    *a,
                    Mat {
                        rows: av.rows,
                        cols: av.cols,
                        data,
                    },
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let d = xhat.cols;
                self.acc_with(grads, *gain, |gg| {
                    for r in 0..g.rows {
                        for c in 0..d {
                            gg.data[c] += g.data[r * d + c] * xhat.data[r * d + c];
                        }
                    }
                });
                self.acc_with(grads, *bias, |gb| {
                    for r in 0..g.rows {
                        for (o, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
                if self.ng(*x) {
                    let mut gx = Mat::zeros(g.rows, d);
                    for r in 0..g.rows {
                        let mut dxhat = vec![0.0; d];
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for c in 0..d {
                            let v = g.data[r * d + c] * gv.data[c];
                            dxhat[c] = v;
                            s1 += v;
                            s2 += v * xhat.data[r * d + c];
                        }
                        let inv_d = 1.0 / d as f64;
                        for c in 0..d {
                            gx.data[r * d + c] = inv_std[r]
                                * (dxhat[c] - inv_d * s1 - xhat.data[r * d + c] * inv_d * s2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols;
                let dh = d / heads;
                let scale = 1.0 / sqrt(dh as f64);
                let (n, m) = (qv.rows, kv.rows);
                let mut gq = Mat::zeros(n, d);
                let mut gk = Mat::zeros(m, d);
                let mut gvm = Mat::zeros(m, d);
                let mut dp = vec![0.0; m];
                for (h, p) in probs.iter().enumerate() {
                    let c0 = h * dh;
                    for i in 0..n {
                        let go = &g.data[i * d + c0..i * d + c0 + dh];
                        let prow = p.row(i);
                        let mut s = 0.0;
                        for j in 0..m {
                            let pij = prow[j];
                            if pij == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            let vrow = &vv.data[j * d + c0..j * d + c0 + dh];
                            let gvrow = &mut gvm.data[j * d + c0..j * d + c0 + dh];
                            for (o, &x) in gvrow.iter_mut().zip(go) {
                                *o += pij * x;
                            }
                            let dpj = dot(go, vrow);
                            dp[j] = dpj;
                            s += pij * dpj;
                        }
                        let qrow = &qv.data[i * d + c0..i * d + c0 + dh];
                        for j in 0..m {
                            let pij = prow[j];
                            if pij == 0.0 {
                                continue;
                            }
                            let ds = pij * (dp[j] - s) * scale;
                            let krow = &kv.data[j * d + c0..j * d + c0 + dh];
                            let gqrow = &mut gq.data[i * d + c0..i * d + c0 + dh];
                            for (o, &x) in gqrow.iter_mut().zip(krow) {
                                *o += ds * x;
                            }
                            let gkrow = &mut gk.data[j * d + c0..j * d + c0 + dh];
                            for (o, &x) in gkrow.iter_mut().zip(qrow) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                self.acc(grads, *q, gq);
                self.acc(grads, *k, gk);
                self.acc(grads, *v, gvm);
            }
            Op::Gather { table, idx } => {
                let cols = g.cols;
                self.acc_with(grads, *table, |gt| {
                    for (r, &t) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gt.data[t * cols + c] += g.data[r * cols + c];
                        }
                    }
                });
            }
            Op::SelectRows { x, idx } => {
                let cols = g.cols;
                self.acc_with(grads, *x, |gx| {
                    for (r, &t) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gx.data[t * cols + c] += g.data[r * cols + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let len = pv.data.len();
                    if self.ng(*p) {
                        let part = Mat {
                            rows: pv.rows,
                            cols: pv.cols,
                            data: g.data[offset..offset + len].to_vec(),
                        };
                        self.acc(grads, *p, part);
                    }
                    offset += len;
                }
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.cols;
                let mut ga = Mat::zeros(av.rows, cols);
                let mut gb = Mat::zeros(av.rows, cols);
                for r in 0..av.rows {
                    let (x, y) = (av.row(r), bv.row(r));
                    let (nx, ny) = (norm(x), norm(y));
                    let c = node.value.data[r];
                    let gr = g.data[r];
                    for j in 0..cols {
                        ga.data[r * cols + j] = gr * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                        gb.data[r * cols + j] = gr * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::BceFromCosine {
                cos,
                labels,
                h,
                clamped,
            } => {
                let n = labels.len() as f64;
                let g0 = g.data[0];
                let data = labels
                    .iter()
                    .zip(h)
                    .zip(clamped)
                    .map(|((&y, &hv), &cl)| {
                        if cl {
                            0.0
                        } else {
                            g0 / n * (-y / hv + (1.0 - y) / (1.0 - hv)) * 0.5
                        }
                    })
                    .collect();
                self.acc(
                    grads,
                    *cos,
                    Mat {
                        rows: labels.len(),
                        cols: 1,
                        data,
                    },
                );
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let g0 = g.data[0];
                let cols = probs.cols;
                let mut gl = Mat::zeros(probs.rows, cols);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for c in 0..cols {
                            gl.data[r * cols + c] = g0 * probs.data[r * cols + c];
                        }
                        gl.data[r * cols + t] -= g0;
                    }
                }
                self.acc(grads, *logits, gl);
            }
        }
    }
}

/// Per-head attention probabilities, each `n x m`. Masked entries are exactly
/// zero; a row with every key masked is all zeros.
pub fn attention_probs(q: &Mat, k: &Mat, heads: usize, mask: &Mask) -> Vec<Mat> {
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / sqrt(dh as f64);
    let (n, m) = (q.rows, k.rows);
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let c0 = h * dh;
        let mut p = Mat::zeros(n, m);
        for i in 0..n {
            let qrow = &q.data[i * d + c0..i * d + c0 + dh];
            let prow = &mut p.data[i * m..(i + 1) * m];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..m {
                if mask.allows(i, j) {
                    let s = dot(qrow, &k.data[j * d + c0..j * d + c0 + dh]) * scale;
                    prow[j] = s;
                    if s > mx {
                        mx = s;
                    }
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in 0..m {
                if mask.allows(i, j) {
                    let e = exp(prow[j] - mx);
                    prow[j] = e;
                    sum += e;
                } else {
                    prow[j] = 0.0;
                }
            }
            for x in prow.iter_mut() {
                *x /= sum;
            }
        }
        out.push(p);
    }
    out
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
