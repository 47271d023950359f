//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and returns the gradient of a
//! scalar node with respect to every node that depends on a differentiable
//! input. All ops are two-dimensional; vectors are `1 x n` or `n x 1`.

use super::tensor::{gemm_acc, Mat, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    AddOuter(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Tanh(Var),
    Silu(Var),
    Elu(Var),
    LeakyRelu(Var, T),
    Exp(Var),
    Square(Var),
    Sigmoid(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    SegmentMean { a: Var, seg: Vec<usize>, counts: Vec<usize> },
    SoftmaxRows(Var),
    LayerNorm { a: Var, rstd: Vec<T> },
    Reshape(Var),
    CrossAttention(Box<AttnCache<T>>),
    BlockTrace(Var, usize),
}

#[derive(Debug, Clone)]
struct AttnCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    ctx_per_group: usize,
    group: Vec<usize>,
    /// Attention weights, laid out `[row][head][token]`.
    probs: Vec<T>,
}

#[derive(Debug)]
struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation recorder.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accum<T: Scalar>(slot: &mut Option<Mat<T>>, delta: Mat<T>) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = self.value(a).matmul_t(ta, self.value(b), tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds the `1 x c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape");
        let bias = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..r {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by the `1 x c` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row shape");
        let gain = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..r {
            for (x, &g) in value.row_mut(i).iter_mut().zip(&gain) {
                *x *= g;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// Multiplies row `i` of `a` by `col[i]` (`col` is `r x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col shape");
        let s = self.value(col).data().to_vec();
        let mut value = self.value(a).clone();
        for (i, &si) in s.iter().enumerate() {
            for x in value.row_mut(i) {
                *x *= si;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    /// `out[i][j] = col[i] + row[j]` for `col: r x 1`, `row: 1 x c`.
    pub fn add_outer(&mut self, col: Var, row: Var) -> Var {
        let (r, one) = self.shape(col);
        let (one2, c) = self.shape(row);
        assert!(one == 1 && one2 == 1, "add_outer expects a column and a row");
        let cv = self.value(col).data().to_vec();
        let rv = self.value(row).data().to_vec();
        let value = Mat::from_fn(r, c, |i, j| cv[i] + rv[j]);
        let ng = self.ng(col) || self.ng(row);
        self.push(value, Op::AddOuter(col, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn offset(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(value, Op::Offset(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(value, Op::Silu(a), ng)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { x.exp() - T::one() });
        let ng = self.ng(a);
        self.push(value, Op::Elu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let ng = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln());
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a), ng)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Column sums, `1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut out = Mat::zeros(1, c);
        for i in 0..r {
            for (o, &x) in out.data_mut().iter_mut().zip(src.row(i)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Row sums, `r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, _) = self.shape(a);
        let src = self.value(a);
        let out = Mat::from_fn(r, 1, |i, _| src.row(i).iter().copied().sum());
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(r, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), r, "concat_cols row mismatch");
            let c = v.cols();
            for i in 0..r {
                out.row_mut(i)[off..off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat_rows col mismatch");
            data.extend_from_slice(v.data());
            r += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::from_vec(r, c, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c);
        let src = self.value(a);
        let out = Mat::from_fn(r, len, |i, j| src.get(i, start + j));
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= r);
        let src = self.value(a);
        let out = Mat::from_vec(len, c, src.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let c = self.shape(a).1;
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(src.row(i));
        }
        let ng = self.ng(a);
        self.push(Mat::from_vec(idx.len(), c, data), Op::Gather(a, idx), ng)
    }

    /// Mean of the rows of `a` within each segment; empty segments give zero rows.
    pub fn segment_mean(&mut self, a: Var, seg: Vec<usize>, segments: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(seg.len(), r);
        let mut counts = vec![0usize; segments];
        for &s in &seg {
            counts[s] += 1;
        }
        let src = self.value(a);
        let mut out = Mat::zeros(segments, c);
        for (i, &s) in seg.iter().enumerate() {
            for (o, &x) in out.row_mut(s).iter_mut().zip(src.row(i)) {
                *o += x;
            }
        }
        for (s, &n) in counts.iter().enumerate() {
            if n > 0 {
                let inv = T::one() / T::of(n as f64);
                for o in out.row_mut(s) {
                    *o *= inv;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentMean { a, seg, counts }, ng)
    }

    /// Row-wise softmax. Entries with `mask == false` get probability zero; a
    /// row with no allowed entry is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let (r, c) = self.shape(a);
        if let Some(m) = mask {
            assert_eq!(m.len(), r * c);
        }
        let src = self.value(a);
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            let allowed = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let row = src.row(i);
            let mut mx = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > mx {
                    mx = x;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            let o = out.row_mut(i);
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (x - mx).exp();
                    o[j] = e;
                    total += e;
                }
            }
            for x in o.iter_mut() {
                *x /= total;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut out = Mat::zeros(r, c);
        let mut rstd = Vec::with_capacity(r);
        let inv_c = T::one() / T::of(c as f64);
        for i in 0..r {
            let row = src.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &x) in out.row_mut(i).iter_mut().zip(row) {
                *o = (x - mean) * rs;
            }
            rstd.push(rs);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { a, rstd }, ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshape(rows, cols);
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Multi-head scaled dot-product attention from query rows onto small
    /// groups of context tokens.
    ///
    /// Query row `i` attends to context rows `group[i]*m .. group[i]*m + m`
    /// where `m = ctx_per_group`. Heads split the width evenly and use the
    /// `1/sqrt(head_dim)` scale.
    pub fn cross_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, ctx_per_group: usize, group: Vec<usize>) -> Var {
        let (n, w) = self.shape(q);
        assert_eq!(self.shape(k), self.shape(v));
        assert_eq!(self.shape(k).1, w);
        assert_eq!(group.len(), n);
        assert!(heads > 0 && w % heads == 0, "width {w} not divisible by {heads} heads");
        let m = ctx_per_group;
        let dh = w / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); n * heads * m];
        let mut out = Mat::zeros(n, w);
        let mut scores = vec![T::zero(); m];
        for i in 0..n {
            let g = group[i];
            let qi = qv.row(i);
            for h in 0..heads {
                let hs = h * dh;
                let mut mx = T::neg_infinity();
                for (t, s) in scores.iter_mut().enumerate() {
                    let kr = &kv.row(g * m + t)[hs..hs + dh];
                    let mut dot = T::zero();
                    for (&a, &b) in qi[hs..hs + dh].iter().zip(kr) {
                        dot += a * b;
                    }
                    *s = dot * scale;
                    mx = mx.max(*s);
                }
                let mut total = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    total += *s;
                }
                let p = &mut probs[(i * heads + h) * m..(i * heads + h + 1) * m];
                let o = &mut out.row_mut(i)[hs..hs + dh];
                for t in 0..m {
                    p[t] = scores[t] / total;
                    let vr = &vv.row(g * m + t)[hs..hs + dh];
                    for (oo, &x) in o.iter_mut().zip(vr) {
                        *oo += p[t] * x;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let cache = AttnCache { q, k, v, heads, ctx_per_group, group, probs };
        self.push(out, Op::CrossAttention(Box::new(cache)), ng)
    }

    /// Attention weights of a [`Tape::cross_attention`] node, `[row][head][token]`.
    pub fn attention_weights(&self, node: Var) -> Option<&[T]> {
        match &self.nodes[node.0].op {
            Op::CrossAttention(c) => Some(&c.probs),
            _ => None,
        }
    }

    /// For `a` of shape `(b*d) x d`, returns the `b x 1` column of traces of
    /// the consecutive `d x d` blocks.
    pub fn block_trace(&mut self, a: Var, d: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(c, d);
        assert_eq!(r % d, 0);
        let src = self.value(a);
        let b = r / d;
        let out = Mat::from_fn(b, 1, |i, _| (0..d).map(|k| src.get(i * d + k, k)).sum());
        let ng = self.ng(a);
        self.push(out, Op::BlockTrace(a, d), ng)
    }

    /// Gradient of the `1 x 1` node `loss` with respect to every node that
    /// needs one.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Input => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // y = op(a) op(b); d op(a) = g op(b)^T
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    if *ta {
                        // a^T = g op(b)^T  =>  a = op(b) g^T
                        gemm_acc(&mut da, bv, *tb, g, true, T::one(), T::zero());
                    } else {
                        gemm_acc(&mut da, g, false, bv, !*tb, T::one(), T::zero());
                    }
                    accum(&mut grads[a.0], da);
                }
                if self.ng(*b) {
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    if *tb {
                        gemm_acc(&mut db, g, true, av, *ta, T::one(), T::zero());
                    } else {
                        gemm_acc(&mut db, av, !*ta, g, false, T::one(), T::zero());
                    }
                    accum(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accum(&mut grads[a.0], g.clone());
                }
                if self.ng(*b) {
                    accum(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accum(&mut grads[a.0], g.clone());
                }
                if self.ng(*b) {
                    accum(&mut grads[b.0], g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accum(&mut grads[a.0], g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    accum(&mut grads[b.0], g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accum(&mut grads[a.0], g.clone());
                }
                if self.ng(*row) {
                    accum(&mut grads[row.0], col_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.ng(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        for (x, &s) in da.row_mut(i).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    accum(&mut grads[a.0], da);
                }
                if self.ng(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    accum(&mut grads[row.0], col_sums(&prod));
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col);
                if self.ng(*a) {
                    let mut da = g.clone();
                    for (i, &s) in cv.data().iter().enumerate() {
                        for x in da.row_mut(i) {
                            *x *= s;
                        }
                    }
                    accum(&mut grads[a.0], da);
                }
                if self.ng(*col) {
                    let av = self.value(*a);
                    let dc = Mat::from_fn(cv.rows(), 1, |i, _| g.row(i).iter().zip(av.row(i)).map(|(&x, &y)| x * y).sum());
                    accum(&mut grads[col.0], dc);
                }
            }
            Op::AddOuter(col, row) => {
                if self.ng(*col) {
                    let dc = Mat::from_fn(g.rows(), 1, |i, _| g.row(i).iter().copied().sum());
                    accum(&mut grads[col.0], dc);
                }
                if self.ng(*row) {
                    accum(&mut grads[row.0], col_sums(g));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accum(&mut grads[a.0], g.map(|x| x * s));
            }
            Op::Offset(a) => accum(&mut grads[a.0], g.clone()),
            Op::Tanh(a) => accum(&mut grads[a.0], g.zip_map(y, |d, t| d * (T::one() - t * t))),
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = g.zip_map(x, |d, x| {
                    let s = T::one() / (T::one() + (-x).exp());
                    d * s * (T::one() + x * (T::one() - s))
                });
                accum(&mut grads[a.0], d);
            }
            Op::Elu(a) => {
                let x = self.value(*a);
                let mut d = g.zip_map(y, |d, yy| d * (yy + T::one()));
                for ((o, &xx), &dd) in d.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
                    if xx > T::zero() {
                        *o = dd;
                    }
                }
                accum(&mut grads[a.0], d);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let d = g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { d * slope });
                accum(&mut grads[a.0], d);
            }
            Op::Exp(a) => accum(&mut grads[a.0], g.zip_map(y, |d, e| d * e)),
            Op::Square(a) => {
                let two = T::of(2.0);
                accum(&mut grads[a.0], g.zip_map(self.value(*a), |d, x| d * two * x));
            }
            Op::Sigmoid(a) => accum(&mut grads[a.0], g.zip_map(y, |d, s| d * s * (T::one() - s))),
            Op::Softplus(a) => accum(&mut grads[a.0], g.zip_map(self.value(*a), |d, x| d / (T::one() + (-x).exp()))),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = g.zip_map(self.value(*a), |d, x| if x >= lo && x <= hi { d } else { T::zero() });
                accum(&mut grads[a.0], d);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                accum(&mut grads[a.0], Mat::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i).copy_from_slice(g.data());
                }
                accum(&mut grads[a.0], d);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let d = Mat::from_fn(r, c, |i, _| g.get(i, 0));
                accum(&mut grads[a.0], d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let d = Mat::from_fn(r, c, |i, j| g.get(i, off + j));
                        accum(&mut grads[p.0], d);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let d = Mat::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        accum(&mut grads[p.0], d);
                    }
                    off += r;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accum(&mut grads[a.0], d);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                d.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                accum(&mut grads[a.0], d);
            }
            Op::Gather(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                for (i, &src) in idx.iter().enumerate() {
                    for (o, &x) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                accum(&mut grads[a.0], d);
            }
            Op::SegmentMean { a, seg, counts } => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                for (i, &s) in seg.iter().enumerate() {
                    let inv = T::one() / T::of(counts[s] as f64);
                    for (o, &x) in d.row_mut(i).iter_mut().zip(g.row(s)) {
                        *o = x * inv;
                    }
                }
                accum(&mut grads[a.0], d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                accum(&mut grads[a.0], d);
            }
            Op::LayerNorm { a, rstd } => {
                let (r, c) = y.shape();
                let inv_c = T::one() / T::of(c as f64);
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let mg = gr.iter().copied().sum::<T>() * inv_c;
                    let mgy = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>() * inv_c;
                    for ((o, &gg), &yy) in d.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = rstd[i] * (gg - mg - yy * mgy);
                    }
                }
                accum(&mut grads[a.0], d);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                accum(&mut grads[a.0], g.clone().reshape(r, c));
            }
            Op::CrossAttention(cache) => self.backprop_attention(cache, g, grads),
            Op::BlockTrace(a, d) => {
                let d = *d;
                let (r, c) = self.shape(*a);
                let mut da = Mat::zeros(r, c);
                for b in 0..r / d {
                    let gb = g.get(b, 0);
                    for k in 0..d {
                        da.set(b * d + k, k, gb);
                    }
                }
                accum(&mut grads[a.0], da);
            }
        }
    }

    fn backprop_attention(&self, c: &AttnCache<T>, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (n, w) = qv.shape();
        let m = c.ctx_per_group;
        let dh = w / c.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = Mat::zeros(n, w);
        let mut dk = Mat::zeros(kv.rows(), w);
        let mut dv = Mat::zeros(vv.rows(), w);
        let mut dp = vec![T::zero(); m];
        for i in 0..n {
            let grp = c.group[i];
            let gi = g.row(i);
            for h in 0..c.heads {
                let hs = h * dh;
                let p = &c.probs[(i * c.heads + h) * m..(i * c.heads + h + 1) * m];
                let go = &gi[hs..hs + dh];
                let mut dot = T::zero();
                for t in 0..m {
                    let row = grp * m + t;
                    let vr = &vv.row(row)[hs..hs + dh];
                    dp[t] = go.iter().zip(vr).map(|(&a, &b)| a * b).sum();
                    dot += p[t] * dp[t];
                    for (o, &x) in dv.row_mut(row)[hs..hs + dh].iter_mut().zip(go) {
                        *o += p[t] * x;
                    }
                }
                let qi = &qv.row(i)[hs..hs + dh];
                for t in 0..m {
                    let ds = p[t] * (dp[t] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let row = grp * m + t;
                    let kr = &kv.row(row)[hs..hs + dh];
                    for (o, &x) in dq.row_mut(i)[hs..hs + dh].iter_mut().zip(kr) {
                        *o += ds * x;
                    }
                    for (o, &x) in dk.row_mut(row)[hs..hs + dh].iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
        if self.ng(c.q) {
            accum(&mut grads[c.q.0], dq);
        }
        if self.ng(c.k) {
            accum(&mut grads[c.k.0], dk);
        }
        if self.ng(c.v) {
            accum(&mut grads[c.v.0], dv);
        }
    }
}

fn col_sums<T: Scalar>(g: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a single-input op.
    fn check_unary(build: impl Fn(&mut Tape<f64>, Var) -> Var, x: Mat<f64>) {
        let (r, c) = x.shape();
        let weights = Mat::from_fn(r, c, |i, j| 0.3 + 0.1 * i as f64 - 0.05 * j as f64);
        let eval = |xm: &Mat<f64>| -> (f64, Option<Mat<f64>>) {
            let mut t = Tape::new();
            let xv = t.param(xm.clone());
            let y = build(&mut t, xv);
            let (yr, yc) = t.shape(y);
            let w = t.constant(Mat::from_fn(yr, yc, |i, j| weights.data()[(i * yc + j) % weights.len()]));
            let p = t.mul(y, w);
            let l = t.sum_all(p);
            let mut g = t.backward(l);
            (t.value(l).item(), g.take(xv))
        };
        let (_, analytic) = eval(&x);
        let analytic = analytic.expect("gradient");
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let num = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let a = analytic.data()[k];
            assert!((a - num).abs() < 1e-6 * (1.0 + a.abs()), "entry {k}: analytic {a} numeric {num}");
        }
    }

    fn sample(r: usize, c: usize) -> Mat<f64> {
        Mat::from_fn(r, c, |i, j| ((i * 7 + j * 3) as f64 * 0.37).sin() * 1.3 + 0.05)
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(|t, x| t.tanh(x), sample(3, 4));
        check_unary(|t, x| t.silu(x), sample(3, 4));
        check_unary(|t, x| t.elu(x), sample(3, 4));
        check_unary(|t, x| t.leaky_relu(x, 0.2), sample(3, 4));
        check_unary(|t, x| t.exp(x), sample(3, 4));
        check_unary(|t, x| t.square(x), sample(3, 4));
        check_unary(|t, x| t.sigmoid(x), sample(3, 4));
        check_unary(|t, x| t.softplus(x), sample(3, 4));
        check_unary(|t, x| t.clamp(x, -0.9, 0.8), sample(3, 4));
    }

    #[test]
    fn structural_gradients() {
        check_unary(|t, x| t.sum_rows(x), sample(3, 4));
        check_unary(|t, x| t.sum_cols(x), sample(3, 4));
        check_unary(|t, x| t.slice_cols(x, 1, 2), sample(3, 4));
        check_unary(|t, x| t.slice_rows(x, 1, 2), sample(3, 4));
        check_unary(|t, x| t.gather_rows(x, vec![2, 0, 2, 1]), sample(3, 4));
        check_unary(|t, x| t.segment_mean(x, vec![1, 1, 0, 1], 3), sample(4, 2));
        check_unary(|t, x| t.layer_norm(x, 1e-5), sample(3, 5));
        check_unary(|t, x| t.reshape(x, 6, 2), sample(3, 4));
        check_unary(|t, x| t.block_trace(x, 2), sample(6, 2));
        check_unary(
            |t, x| {
                let y = t.slice_cols(x, 0, 2);
                t.concat_cols(&[x, y])
            },
            sample(3, 4),
        );
        check_unary(
            |t, x| {
                let y = t.slice_rows(x, 0, 1);
                t.concat_rows(&[y, x])
            },
            sample(3, 4),
        );
    }

    #[test]
    fn masked_softmax_gradient_and_values() {
        let mask = vec![true, false, true, true, true, true, false, false, false];
        check_unary(|t, x| t.softmax_rows(x, Some(&mask)), sample(3, 3));
        let mut t = Tape::<f64>::new();
        let x = t.constant(sample(3, 3));
        let y = t.softmax_rows(x, Some(&mask));
        let v = t.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(v.row(2), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn binary_op_gradients() {
        let other = sample(3, 4).map(|x| x * 0.5 + 0.2);
        check_unary(
            |t, x| {
                let o = t.constant(other.clone());
                let a = t.mul(x, o);
                let b = t.sub(a, x);
                t.add(b, a)
            },
            sample(3, 4),
        );
        // Both sides of a matmul, all transpose combinations.
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let fixed = sample(4, 4);
            check_unary(|t, x| {
                let f = t.constant(fixed.clone());
                t.matmul_t(x, ta, f, tb)
            }, sample(4, 4));
            check_unary(|t, x| {
                let f = t.constant(fixed.clone());
                t.matmul_t(f, ta, x, tb)
            }, sample(4, 4));
        }
        check_unary(
            |t, x| {
                let r = t.slice_rows(x, 0, 1);
                let a = t.add_row(x, r);
                t.mul_row(a, r)
            },
            sample(3, 4),
        );
        check_unary(
            |t, x| {
                let c = t.slice_cols(x, 1, 1);
                t.mul_col(x, c)
            },
            sample(3, 4),
        );
        check_unary(
            |t, x| {
                let c = t.slice_cols(x, 0, 1);
                let r = t.slice_rows(x, 1, 1);
                t.add_outer(c, r)
            },
            sample(3, 3),
        );
    }

    #[test]
    fn cross_attention_gradient() {
        // 3 query rows over 2 groups of 2 context tokens, width 4, 2 heads.
        let kv = sample(4, 4).map(|x| x * 0.7);
        let vv = sample(4, 4).map(|x| x.cos());
        check_unary(
            |t, x| {
                let k = t.constant(kv.clone());
                let v = t.constant(vv.clone());
                t.cross_attention(x, k, v, 2, 2, vec![0, 1, 1])
            },
            sample(3, 4),
        );
        let qv = sample(3, 4);
        check_unary(
            |t, x| {
                let q = t.constant(qv.clone());
                let v = t.constant(vv.clone());
                t.cross_attention(q, x, v, 2, 2, vec![0, 1, 1])
            },
            kv.clone(),
        );
        check_unary(
            |t, x| {
                let q = t.constant(qv.clone());
                let k = t.constant(kv.clone());
                t.cross_attention(q, k, x, 2, 2, vec![0, 1, 1])
            },
            vv.clone(),
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Mat::scalar(2.0));
        let p = t.param(Mat::scalar(3.0));
        let y = t.mul(c, p);
        let mut g = t.backward(y);
        assert!(g.take(c).is_none());
        assert_eq!(g.take(p).unwrap().item(), 2.0);
    }
}
