//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Frozen weights enter the tape as borrowed constants, so no gradient is
//! ever computed for them; only nodes downstream of a parameter take part in
//! the backward sweep.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Matrix),
    Borrowed(&'a Matrix),
}

impl Deref for Value<'_> {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    Gelu(Var),
    Attention { qkv: Var, heads: usize, causal: bool, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    Sum(Vec<Var>),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for a single backward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Value::Owned(value), op, requires_grad)
    }

    pub fn constant(&mut self, m: &'a Matrix) -> Var {
        self.push(Value::Borrowed(m), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, m: Matrix) -> Var {
        self.push(Value::Owned(m), Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, m: &'a Matrix) -> Var {
        self.push(Value::Borrowed(m), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, m: Matrix) -> Var {
        self.push(Value::Owned(m), Op::Leaf, true)
    }

    /// Binds `m` as a parameter or a constant.
    pub fn leaf(&mut self, m: &'a Matrix, trainable: bool) -> Var {
        if trainable {
            self.param(m)
        } else {
            self.constant(m)
        }
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols(), bm.rows(), "matmul inner dimension");
        let mut out = Matrix::zeros(am.rows(), bm.cols());
        matmul_acc(am.as_slice(), bm.as_slice(), out.as_mut_slice(), am.rows(), am.cols(), bm.cols());
        self.push_owned(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols(), bm.cols(), "matmul_bt inner dimension");
        let mut out = Matrix::zeros(am.rows(), bm.rows());
        matmul_bt_acc(am.as_slice(), bm.as_slice(), out.as_mut_slice(), am.rows(), am.cols(), bm.rows());
        self.push_owned(out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.shape(), bm.shape(), "add shapes");
        let mut out = am.clone();
        out.add_assign(bm);
        self.push_owned(out, Op::Add(a, b), &[a, b])
    }

    /// Adds the single-row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "broadcast row");
        assert_eq!(am.cols(), rm.cols(), "broadcast width");
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rm.as_slice()) {
                *o += b;
            }
        }
        self.push_owned(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        self.push_owned(out, Op::Scale(a, s), &[a])
    }

    /// Row-wise layer normalization with `1×cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xm = self.value(x);
        let (g, b) = (self.value(gain).as_slice(), self.value(bias).as_slice());
        let cols = xm.cols();
        assert_eq!(g.len(), cols, "layer norm gain width");
        let mut out = Matrix::zeros(xm.rows(), cols);
        let mut stats = Vec::with_capacity(xm.rows());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / libm::sqrt(var + LN_EPS);
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mean) * rstd * g[c] + b[c];
            }
            stats.push((mean, rstd));
        }
        self.push_owned(out, Op::LayerNorm { x, gain, bias, stats }, &[x, gain, bias])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.as_mut_slice() {
            let u = *v;
            *v = 0.5 * u * (1.0 + libm::tanh(GELU_C * (u + 0.044715 * u * u * u)));
        }
        self.push_owned(out, Op::Gelu(x), &[x])
    }

    /// Multi-head scaled dot-product self-attention over a fused `n × 3d`
    /// query/key/value matrix. Returns the `n × d` concatenated head outputs.
    pub fn attention(&mut self, qkv: Var, heads: usize, causal: bool) -> Var {
        let m = self.value(qkv);
        let n = m.rows();
        let d = m.cols() / 3;
        assert_eq!(d * 3, m.cols(), "fused qkv width");
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let src = m.as_slice();
        let w = 3 * d;
        let mut probs = vec![0.0; heads * n * n];
        let mut out = Matrix::zeros(n, d);
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let q = &src[i * w + qo..i * w + qo + dh];
                let limit = if causal { i + 1 } else { n };
                let row = &mut p[i * n..(i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..limit {
                    let s = dot(q, &src[j * w + ko..j * w + ko + dh]) * scale;
                    row[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut sum = 0.0;
                for v in &mut row[..limit] {
                    *v = libm::exp(*v - max);
                    sum += *v;
                }
                for v in &mut row[..limit] {
                    *v /= sum;
                }
                let o = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
                for j in 0..limit {
                    let pij = row[j];
                    let vrow = &src[j * w + vo..j * w + vo + dh];
                    for (a, b) in o.iter_mut().zip(vrow) {
                        *a += pij * b;
                    }
                }
            }
        }
        self.push_owned(out, Op::Attention { qkv, heads, causal, probs }, &[qkv])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat widths");
            data.extend_from_slice(m.as_slice());
        }
        let out = Matrix::from_vec(rows, cols, data).expect("consistent concat");
        self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        self.push_owned(out, Op::SliceRows { x, start }, &[x])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = libm::sqrt(dot(row, row)).max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push_owned(out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Softmax cross-entropy of a `1 × C` logit row against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), 1, "cross entropy takes one logit row");
        assert!(target < l.cols(), "target class in range");
        let row = l.as_slice();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| libm::exp(v - max)).collect();
        let sum: f64 = exps.iter().sum();
        let loss = libm::log(sum) + max - row[target];
        let probs = exps.iter().map(|e| e / sum).collect();
        let out = Matrix::row_vector(vec![loss]);
        self.push_owned(out, Op::CrossEntropy { logits, target, probs }, &[logits])
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum of nothing");
        let mut out = self.value(parts[0]).clone();
        for p in &parts[1..] {
            out.add_assign(self.value(*p));
        }
        self.push_owned(out, Op::Sum(parts.to_vec()), parts)
    }

    /// Back-propagates from `output` (seeded with ones) and returns the
    /// gradients of every parameter leaf.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Gradients { grads };
        }
        let (r, c) = self.value(output).shape();
        grads[output.0] = Some(Matrix::filled(r, c, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Matrix>], v: Var) -> Option<&'g mut Matrix> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let (r, c) = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_bt_acc(g.as_slice(), bm.as_slice(), ga.as_mut_slice(), am.rows(), bm.cols(), bm.rows());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_at_acc(am.as_slice(), g.as_slice(), gb.as_mut_slice(), am.rows(), am.cols(), bm.cols());
                }
            }
            Op::MatMulBt(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_acc(g.as_slice(), bm.as_slice(), ga.as_mut_slice(), am.rows(), bm.rows(), bm.cols());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_at_acc(g.as_slice(), am.as_slice(), gb.as_mut_slice(), am.rows(), bm.rows(), am.cols());
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let acc = gr.as_mut_slice();
                    for r in 0..g.rows() {
                        for (o, v) in acc.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, v) in ga.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o += s * v;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xm = self.value(*x);
                let gv = self.value(*gain).as_slice();
                let cols = xm.cols();
                let mut dx = Matrix::zeros(xm.rows(), cols);
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..xm.rows() {
                    let (mean, rstd) = stats[r];
                    let row = xm.row(r);
                    let grow = g.row(r);
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * rstd;
                        dgain[c] += grow[c] * xhat[c];
                        dbias[c] += grow[c];
                        dxhat[c] = grow[c] * gv[c];
                        s1 += dxhat[c];
                        s2 += dxhat[c] * xhat[c];
                    }
                    s1 /= cols as f64;
                    s2 /= cols as f64;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = rstd * (dxhat[c] - s1 - xhat[c] * s2);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    gx.add_assign(&dx);
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for (o, v) in gg.as_mut_slice().iter_mut().zip(&dgain) {
                        *o += v;
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for (o, v) in gb.as_mut_slice().iter_mut().zip(&dbias) {
                        *o += v;
                    }
                }
            }
            Op::Gelu(x) => {
                let xm = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &u), &gv) in gx.as_mut_slice().iter_mut().zip(xm.as_slice()).zip(g.as_slice()) {
                        let t = libm::tanh(GELU_C * (u + 0.044715 * u * u * u));
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u);
                        *o += gv * (0.5 * (1.0 + t) + 0.5 * u * dt);
                    }
                }
            }
            Op::Attention { qkv, heads, causal, probs } => {
                let m = self.value(*qkv);
                let n = m.rows();
                let d = m.cols() / 3;
                let dh = d / heads;
                let w = 3 * d;
                let scale = 1.0 / libm::sqrt(dh as f64);
                let src = m.as_slice();
                let Some(gq) = self.slot(grads, *qkv) else { return };
                let dst = gq.as_mut_slice();
                let mut dp = vec![0.0; n];
                for h in 0..*heads {
                    let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    for i in 0..n {
                        let limit = if *causal { i + 1 } else { n };
                        let go = &g.row(i)[h * dh..(h + 1) * dh];
                        let prow = &p[i * n..(i + 1) * n];
                        // dP = dO · Vᵀ and dV += Pᵀ · dO
                        let mut weighted = 0.0;
                        for j in 0..limit {
                            let vrow = &src[j * w + vo..j * w + vo + dh];
                            dp[j] = dot(go, vrow);
                            weighted += dp[j] * prow[j];
                            let pij = prow[j];
                            let dv = &mut dst[j * w + vo..j * w + vo + dh];
                            for (a, b) in dv.iter_mut().zip(go) {
                                *a += pij * b;
                            }
                        }
                        // dS = P ⊙ (dP − Σ dP·P), then through the scaled scores.
                        for j in 0..limit {
                            let ds = prow[j] * (dp[j] - weighted) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                let kj = src[j * w + ko + c];
                                let qi = src[i * w + qo + c];
                                dst[i * w + qo + c] += ds * kj;
                                dst[j * w + ko + c] += ds * qi;
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if let Some(gp) = self.slot(grads, *p) {
                        let cols = g.cols();
                        let src = &g.as_slice()[offset * cols..(offset + rows) * cols];
                        for (o, v) in gp.as_mut_slice().iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cols = g.cols();
                    let dst = &mut gx.as_mut_slice()[start * cols..(start + g.rows()) * cols];
                    for (o, v) in dst.iter_mut().zip(g.as_slice()) {
                        *o += v;
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = &*node.value;
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = dot(yr, gr);
                        let n = norms[r];
                        for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += (gv - yv * proj) / n;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                let up = g.as_slice()[0];
                if let Some(gl) = self.slot(grads, *logits) {
                    for (c, (o, p)) in gl.as_mut_slice().iter_mut().zip(probs).enumerate() {
                        let onehot = if c == *target { 1.0 } else { 0.0 };
                        *o += up * (p - onehot);
                    }
                }
            }
            Op::Sum(parts) => {
                for p in parts {
                    if let Some(gp) = self.slot(grads, *p) {
                        gp.add_assign(g);
                    }
                }
            }
        }
    }
}

/// Gradients of parameter leaves after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of a scalar function of one matrix.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            g.as_mut_slice()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(x: &Matrix, build: &dyn Fn(&mut Tape<'_>, Var) -> Var) {
        let f = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.param(m);
            let out = build(&mut t, v);
            t.value(out).as_slice()[0]
        };
        let mut t = Tape::new();
        let v = t.param(x);
        let out = build(&mut t, v);
        let analytic = t.backward(out).get(v).cloned().unwrap();
        let numeric = numeric_grad(x, &f);
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "gradient mismatch {err}");
    }

    /// Reduces a matrix to a scalar with fixed random weights.
    fn probe(t: &mut Tape<'_>, x: Var, w: &Matrix) -> Var {
        let w = t.constant_owned(w.clone());
        let y = t.matmul_bt(x, w); // rows × 1
        let cols = t.value(y).rows();
        let parts: Vec<Var> = (0..cols).map(|r| t.slice_rows(y, r, 1)).collect();
        t.sum(&parts)
    }

    #[test]
    fn attention_and_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::randn(5, 12, 1.0, &mut rng);
        let w = Matrix::randn(1, 4, 1.0, &mut rng);
        for causal in [false, true] {
            check(&x, &|t, v| {
                let a = t.attention(v, 2, causal);
                probe(t, a, &w)
            });
        }
        let w6 = Matrix::randn(1, 6, 1.0, &mut rng);
        let x6 = Matrix::randn(4, 6, 1.0, &mut rng);
        let gain = Matrix::randn(1, 6, 1.0, &mut rng);
        let bias = Matrix::randn(1, 6, 1.0, &mut rng);
        check(&x6, &|t, v| {
            let g = t.constant_owned(gain.clone());
            let b = t.constant_owned(bias.clone());
            let y = t.layer_norm(v, g, b);
            let y = t.gelu(y);
            probe(t, y, &w6)
        });
        check(&gain, &|t, g| {
            let xv = t.constant_owned(x6.clone());
            let b = t.constant_owned(bias.clone());
            let y = t.layer_norm(xv, g, b);
            probe(t, y, &w6)
        });
        check(&x6, &|t, v| {
            let y = t.normalize_rows(v);
            let y = t.scale(y, 3.0);
            probe(t, y, &w6)
        });
    }

    #[test]
    fn matmul_and_cross_entropy_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::randn(3, 4, 1.0, &mut rng);
        let b = Matrix::randn(4, 5, 1.0, &mut rng);
        let row = Matrix::randn(1, 5, 1.0, &mut rng);
        let w = Matrix::randn(1, 5, 1.0, &mut rng);
        check(&a, &|t, v| {
            let bv = t.constant_owned(b.clone());
            let r = t.constant_owned(row.clone());
            let y = t.matmul(v, bv);
            let y = t.add_row(y, r);
            probe(t, y, &w)
        });
        check(&b, &|t, v| {
            let av = t.constant_owned(a.clone());
            let y = t.matmul(av, v);
            let first = t.slice_rows(y, 1, 1);
            t.cross_entropy(first, 2)
        });
        let bt = b.transpose();
        check(&bt, &|t, v| {
            let av = t.constant_owned(a.clone());
            let y = t.matmul_bt(av, v);
            let parts = [t.slice_rows(y, 0, 1), t.slice_rows(y, 2, 1)];
            let y = t.concat_rows(&parts);
            let y = t.add(y, y);
            probe(t, y, &w)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let a = Matrix::filled(2, 2, 1.0);
        let b = Matrix::filled(2, 2, 2.0);
        let mut t = Tape::new();
        let av = t.param(&a);
        let bv = t.constant_owned(b.clone());
        let y = t.matmul(av, bv);
        let first = t.slice_rows(y, 0, 1);
        let loss = t.cross_entropy(first, 0);
        let g = t.backward(loss);
        assert!(g.get(av).is_some());
        assert!(g.get(bv).is_none());
    }
}
