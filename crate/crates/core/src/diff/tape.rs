//! Reverse-mode tape over `[channels, sequence]` matrices.
//!
//! A batch of samples is stored side by side along the sequence axis; ops
//! that mix sequence positions (attention, token mixing) take the per-sample
//! segment length so they never cross sample boundaries.

use std::rc::Rc;

use crate::diff::params::{ParamId, ParamStore};
use crate::error::{MinoError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    MulRows(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    Silu(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherCols { x: Var, idx: Rc<[usize]> },
    SegmentMean { x: Var, offsets: Rc<[usize]> },
    Attention(Box<AttentionCache<T>>),
    TokenLinear { x: Var, w: Var, b: Var, seg_in: usize },
    MeanSquaredError { pred: Var, target: Matrix<T> },
    SumSquares(Var),
}

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    seg_q: usize,
    seg_kv: usize,
    /// Softmax weights laid out `[batch, head, seg_q, seg_kv]`.
    probs: Vec<T>,
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for one backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Softmax weights of an attention node, `[batch, head, seg_q, seg_kv]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention(cache) => Some(&cache.probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(
            value.as_slice().iter().all(|x| x.is_finite()),
            "non-finite value produced by tape node {}",
            self.nodes.len()
        );
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf; its gradient lands in the store on [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let slot = store.slot(id);
        let value = Matrix::from_vec(slot.rows, slot.cols, store.value(id).to_vec()).expect("slot shape");
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x[c, s] + bias[c]` with `bias` shaped `[C, 1]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let rows = self.shape(x).0;
        if self.shape(bias) != (rows, 1) {
            return Err(MinoError::shape("add_bias", format!("[{rows}, 1]"), format!("{:?}", self.shape(bias))));
        }
        let b = self.value(bias).as_slice().to_vec();
        let mut out = self.value(x).clone();
        for r in 0..rows {
            out.row_mut(r).iter_mut().for_each(|v| *v += b[r]);
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// `x[c, s] * gain[c]` with `gain` shaped `[C, 1]`.
    pub fn mul_rows(&mut self, x: Var, gain: Var) -> Result<Var> {
        let rows = self.shape(x).0;
        if self.shape(gain) != (rows, 1) {
            return Err(MinoError::shape("mul_rows", format!("[{rows}, 1]"), format!("{:?}", self.shape(gain))));
        }
        let g = self.value(gain).as_slice().to_vec();
        let mut out = self.value(x).clone();
        for r in 0..rows {
            out.row_mut(r).iter_mut().for_each(|v| *v *= g[r]);
        }
        let ng = self.needs(x) || self.needs(gain);
        Ok(self.push(out, Op::MulRows(x, gain), ng))
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(MinoError::shape(op, format!("{:?}", va.shape()), format!("{:?}", vb.shape())));
        }
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let mut out = self.value(x).clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v += c);
        let ng = self.needs(x);
        self.push(out, Op::AddConst(x), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut out = self.value(x).clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v *= c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v = *v * sigmoid(*v));
        let ng = self.needs(x);
        self.push(out, Op::Silu(x), ng)
    }

    /// Per-column normalization over channels (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let inv_n = T::one() / T::from_usize(rows).unwrap();
        let mut mean = vec![T::zero(); cols];
        let mut var = vec![T::zero(); cols];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_n);
        for r in 0..rows {
            for ((s, &v), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let rstd: Vec<T> = var.iter().map(|&s| T::one() / (s * inv_n + eps).sqrt()).collect();
        let mut out = xv.clone();
        for r in 0..rows {
            for ((o, &m), &rs) in out.row_mut(r).iter_mut().zip(&mean).zip(&rstd) {
                *o = (*o - m) * rs;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::LayerNorm { x, rstd }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(MinoError::shape("concat_rows", cols, v.cols()));
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.rows() {
            return Err(MinoError::shape("slice_rows", format!("rows <= {}", v.rows()), start + len));
        }
        let cols = v.cols();
        let out = Matrix::from_vec(len, cols, v.as_slice()[start * cols..(start + len) * cols].to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    /// `out[:, k] = x[:, idx[k]]`.
    pub fn gather_cols(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(MinoError::shape("gather_cols", format!("index < {cols}"), bad));
        }
        let mut out = Matrix::zeros(rows, idx.len());
        for r in 0..rows {
            let src = v.row(r);
            for (o, &i) in out.row_mut(r).iter_mut().zip(idx.iter()) {
                *o = src[i];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::GatherCols { x, idx }, ng))
    }

    /// Mean over consecutive column groups `offsets[q]..offsets[q + 1]`; empty groups give zero.
    pub fn segment_mean(&mut self, x: Var, offsets: Rc<[usize]>) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        if offsets.last().copied() != Some(cols) || offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(MinoError::shape("segment_mean", format!("offsets ending at {cols}"), format!("{:?}", offsets.last())));
        }
        let groups = offsets.len() - 1;
        let mut out = Matrix::zeros(rows, groups);
        for r in 0..rows {
            let src = v.row(r);
            let dst = out.row_mut(r);
            for q in 0..groups {
                let (a, b) = (offsets[q], offsets[q + 1]);
                if b > a {
                    let s: T = src[a..b].iter().copied().sum();
                    dst[q] = s / T::from_usize(b - a).unwrap();
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SegmentMean { x, offsets }, ng))
    }

    /// Multi-head scaled dot-product attention applied per sample segment.
    ///
    /// `q` is `[C, B*seg_q]`, `k` and `v` are `[C, B*seg_kv]`; channel rows are
    /// split evenly into `heads` groups. Softmax runs over keys with the
    /// row maximum subtracted first.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seg_q: usize, seg_kv: usize) -> Result<Var> {
        let (c, sq_total) = self.shape(q);
        let (ck, skv_total) = self.shape(k);
        if heads == 0 || c % heads != 0 {
            return Err(MinoError::invalid(format!("channel width {c} not divisible by {heads} heads")));
        }
        if ck != c || self.shape(v) != (c, skv_total) {
            return Err(MinoError::shape("attention", format!("[{c}, {skv_total}] keys and values"), format!("{:?}/{:?}", self.shape(k), self.shape(v))));
        }
        if seg_q == 0 || seg_kv == 0 || sq_total % seg_q != 0 || skv_total % seg_kv != 0 || sq_total / seg_q != skv_total / seg_kv {
            return Err(MinoError::shape("attention", "matching batch segments", format!("{sq_total}/{seg_q} vs {skv_total}/{seg_kv}")));
        }
        let batch = sq_total / seg_q;
        let dh = c / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seg_q * seg_kv];
        let mut out = Matrix::zeros(c, sq_total);
        let sq_stride = sq_total as isize;
        let skv_stride = skv_total as isize;
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seg_q * seg_kv..][..seg_q * seg_kv];
                let q_off = h * dh * sq_total + b * seg_q;
                let k_off = h * dh * skv_total + b * seg_kv;
                // scores [seg_q, seg_kv] = Q_h^T K_h
                T::gemm(
                    seg_q,
                    dh,
                    seg_kv,
                    scale,
                    &qv.as_slice()[q_off..],
                    (1, sq_stride),
                    &kv.as_slice()[k_off..],
                    (skv_stride, 1),
                    T::zero(),
                    p,
                    (seg_kv as isize, 1),
                );
                for row in p.chunks_mut(seg_kv) {
                    softmax_in_place(row);
                }
                // out_h [dh, seg_q] = V_h P^T
                T::gemm(
                    dh,
                    seg_kv,
                    seg_q,
                    T::one(),
                    &vv.as_slice()[k_off..],
                    (skv_stride, 1),
                    p,
                    (1, seg_kv as isize),
                    T::zero(),
                    &mut out.as_mut_slice()[q_off..],
                    (sq_stride, 1),
                );
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            seg_q,
            seg_kv,
            probs,
        };
        Ok(self.push(out, Op::Attention(Box::new(cache)), ng))
    }

    /// Linear map across sequence positions inside each segment:
    /// `out_b = x_b W^T + b^T` with `W` `[N_out, seg_in]` and `b` `[N_out, 1]`.
    pub fn token_linear(&mut self, x: Var, w: Var, b: Var, seg_in: usize) -> Result<Var> {
        let (c, total) = self.shape(x);
        let (n_out, n_in) = self.shape(w);
        if n_in != seg_in || seg_in == 0 || total % seg_in != 0 || self.shape(b) != (n_out, 1) {
            return Err(MinoError::shape("token_linear", format!("weight [_, {seg_in}] and bias [{n_out}, 1]"), format!("{:?}", self.shape(w))));
        }
        let batch = total / seg_in;
        let out_total = batch * n_out;
        let mut out = Matrix::zeros(c, out_total);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for s in 0..batch {
            T::gemm(
                c,
                seg_in,
                n_out,
                T::one(),
                &xv.as_slice()[s * seg_in..],
                (total as isize, 1),
                wv.as_slice(),
                (1, seg_in as isize),
                T::zero(),
                &mut out.as_mut_slice()[s * n_out..],
                (out_total as isize, 1),
            );
        }
        for r in 0..c {
            let row = out.row_mut(r);
            for s in 0..batch {
                for (o, &bb) in row[s * n_out..(s + 1) * n_out].iter_mut().zip(bv.as_slice()) {
                    *o += bb;
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::TokenLinear { x, w, b, seg_in }, ng))
    }

    /// Mean of squared differences to a constant target, as a `[1, 1]` node.
    pub fn mse(&mut self, pred: Var, target: Matrix<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(MinoError::shape("mse", format!("{:?}", p.shape()), format!("{:?}", target.shape())));
        }
        let n = T::from_usize(p.as_slice().len().max(1)).unwrap();
        let s: T = p.as_slice().iter().zip(target.as_slice()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let out = Matrix::from_vec(1, 1, vec![s / n])?;
        let ng = self.needs(pred);
        Ok(self.push(out, Op::MeanSquaredError { pred, target }, ng))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: T = self.value(x).as_slice().iter().map(|&a| a * a).sum();
        let ng = self.needs(x);
        self.push(Matrix::from_vec(1, 1, vec![s]).unwrap(), Op::SumSquares(x), ng)
    }

    /// Accumulate `d loss / d theta` into the store's gradient buffer.
    ///
    /// `loss` must be a `[1, 1]` node recorded on this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(MinoError::NoForward);
        }
        if self.shape(loss) != (1, 1) {
            return Err(MinoError::shape("backward", "[1, 1] loss", format!("{:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>], store: &mut ParamStore<T>) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g.as_slice()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, g.matmul_nt(bv).expect("matmul grad"));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, av.transpose().matmul(g).expect("matmul grad"));
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs(*bias) {
                    let gb: Vec<T> = (0..g.rows()).map(|r| g.row(r).iter().copied().sum()).collect();
                    accumulate(grads, *bias, Matrix::from_vec(g.rows(), 1, gb).unwrap());
                }
                if self.needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
            }
            Op::MulRows(x, gain) => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                if self.needs(*gain) {
                    let gg: Vec<T> = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(&a, &b)| a * b).sum())
                        .collect();
                    accumulate(grads, *gain, Matrix::from_vec(g.rows(), 1, gg).unwrap());
                }
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        let s = gv.get(r, 0);
                        gx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, map(g, |x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, zip(g, bv, |x, y| x * y));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, zip(g, av, |x, y| x * y));
                }
            }
            Op::AddConst(x) => accumulate(grads, *x, g.clone()),
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(grads, *x, map(g, |v| v * c));
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                accumulate(
                    grads,
                    *x,
                    zip(g, xv, |gy, v| {
                        let s = sigmoid(v);
                        gy * (s + v * s * (T::one() - s))
                    }),
                );
            }
            Op::LayerNorm { x, rstd } => {
                let xhat = &node.value;
                let (rows, cols) = xhat.shape();
                let inv_n = T::one() / T::from_usize(rows).unwrap();
                let mut mean_g = vec![T::zero(); cols];
                let mut mean_gx = vec![T::zero(); cols];
                for r in 0..rows {
                    for (c, (&gy, &xh)) in g.row(r).iter().zip(xhat.row(r)).enumerate() {
                        mean_g[c] += gy;
                        mean_gx[c] += gy * xh;
                    }
                }
                let mut gx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let v = rstd[c] * (g.get(r, c) - mean_g[c] * inv_n - xhat.get(r, c) * mean_gx[c] * inv_n);
                        gx.set(r, c, v);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.needs(p) {
                        let part = g.as_slice()[start * cols..(start + rows) * cols].to_vec();
                        accumulate(grads, p, Matrix::from_vec(rows, cols, part).unwrap());
                    }
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Matrix::zeros(rows, cols);
                gx.as_mut_slice()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.as_slice());
                accumulate(grads, *x, gx);
            }
            Op::GatherCols { x, idx } => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let dst = gx.row_mut(r);
                    for (&gy, &i) in g.row(r).iter().zip(idx.iter()) {
                        dst[i] += gy;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SegmentMean { x, offsets } => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let src = g.row(r);
                    let dst = gx.row_mut(r);
                    for q in 0..offsets.len() - 1 {
                        let (a, b) = (offsets[q], offsets[q + 1]);
                        if b > a {
                            let share = src[q] / T::from_usize(b - a).unwrap();
                            dst[a..b].iter_mut().for_each(|v| *v = share);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
            Op::TokenLinear { x, w, b, seg_in } => {
                let (c, total) = self.shape(*x);
                let (n_out, _) = self.shape(*w);
                let batch = total / seg_in;
                let out_total = batch * n_out;
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); n_out];
                    for r in 0..c {
                        for (j, &gy) in g.row(r).iter().enumerate() {
                            gb[j % n_out] += gy;
                        }
                    }
                    accumulate(grads, *b, Matrix::from_vec(n_out, 1, gb).unwrap());
                }
                if self.needs(*w) {
                    // dW [n_out, seg_in] = sum_b G_b^T X_b
                    let mut gw = Matrix::zeros(n_out, *seg_in);
                    for s in 0..batch {
                        T::gemm(
                            n_out,
                            c,
                            *seg_in,
                            T::one(),
                            &g.as_slice()[s * n_out..],
                            (1, out_total as isize),
                            &xv.as_slice()[s * seg_in..],
                            (total as isize, 1),
                            T::one(),
                            gw.as_mut_slice(),
                            (*seg_in as isize, 1),
                        );
                    }
                    accumulate(grads, *w, gw);
                }
                if self.needs(*x) {
                    // dX_b [c, seg_in] = G_b W
                    let mut gx = Matrix::zeros(c, total);
                    for s in 0..batch {
                        T::gemm(
                            c,
                            n_out,
                            *seg_in,
                            T::one(),
                            &g.as_slice()[s * n_out..],
                            (out_total as isize, 1),
                            wv.as_slice(),
                            (*seg_in as isize, 1),
                            T::zero(),
                            &mut gx.as_mut_slice()[s * seg_in..],
                            (total as isize, 1),
                        );
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::MeanSquaredError { pred, target } => {
                let pv = self.value(*pred);
                let n = T::from_usize(pv.as_slice().len().max(1)).unwrap();
                let scale = g.get(0, 0) * T::from_f64_lossy(2.0) / n;
                accumulate(grads, *pred, zip(pv, target, |p, t| (p - t) * scale));
            }
            Op::SumSquares(x) => {
                let s = g.get(0, 0) * T::from_f64_lossy(2.0);
                accumulate(grads, *x, map(self.value(*x), |v| v * s));
            }
        }
    }

    fn attention_backward(&self, cache: &AttentionCache<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let AttentionCache {
            q,
            k,
            v,
            heads,
            seg_q,
            seg_kv,
            probs,
        } = cache;
        let (heads, seg_q, seg_kv) = (*heads, *seg_q, *seg_kv);
        let (c, sq_total) = self.shape(*q);
        let skv_total = self.shape(*k).1;
        let batch = sq_total / seg_q;
        let dh = c / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
        let mut gq = Matrix::zeros(c, sq_total);
        let mut gk = Matrix::zeros(c, skv_total);
        let mut gv = Matrix::zeros(c, skv_total);
        let sq_stride = sq_total as isize;
        let skv_stride = skv_total as isize;
        let mut dp = vec![T::zero(); seg_q * seg_kv];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seg_q * seg_kv..][..seg_q * seg_kv];
                let q_off = h * dh * sq_total + b * seg_q;
                let k_off = h * dh * skv_total + b * seg_kv;
                // dV_h [dh, seg_kv] = dO_h P
                T::gemm(
                    dh,
                    seg_q,
                    seg_kv,
                    T::one(),
                    &g.as_slice()[q_off..],
                    (sq_stride, 1),
                    p,
                    (seg_kv as isize, 1),
                    T::zero(),
                    &mut gv.as_mut_slice()[k_off..],
                    (skv_stride, 1),
                );
                // dP [seg_q, seg_kv] = dO_h^T V_h
                T::gemm(
                    seg_q,
                    dh,
                    seg_kv,
                    T::one(),
                    &g.as_slice()[q_off..],
                    (1, sq_stride),
                    &vv.as_slice()[k_off..],
                    (skv_stride, 1),
                    T::zero(),
                    &mut dp,
                    (seg_kv as isize, 1),
                );
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
                for (drow, prow) in dp.chunks_mut(seg_kv).zip(p.chunks(seg_kv)) {
                    let dot: T = drow.iter().zip(prow).map(|(&d, &pp)| d * pp).sum();
                    for (d, &pp) in drow.iter_mut().zip(prow) {
                        *d = pp * (*d - dot) * scale;
                    }
                }
                // dQ_h [dh, seg_q] = K_h dS^T
                T::gemm(
                    dh,
                    seg_kv,
                    seg_q,
                    T::one(),
                    &kv.as_slice()[k_off..],
                    (skv_stride, 1),
                    &dp,
                    (1, seg_kv as isize),
                    T::zero(),
                    &mut gq.as_mut_slice()[q_off..],
                    (sq_stride, 1),
                );
                // dK_h [dh, seg_kv] = Q_h dS
                T::gemm(
                    dh,
                    seg_q,
                    seg_kv,
                    T::one(),
                    &qv.as_slice()[q_off..],
                    (sq_stride, 1),
                    &dp,
                    (seg_kv as isize, 1),
                    T::zero(),
                    &mut gk.as_mut_slice()[k_off..],
                    (skv_stride, 1),
                );
            }
        }
        if self.needs(*q) {
            accumulate(grads, *q, gq);
        }
        if self.needs(*k) {
            accumulate(grads, *k, gk);
        }
        if self.needs(*v) {
            accumulate(grads, *v, gv);
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn map<T: Scalar>(m: &Matrix<T>, f: impl Fn(T) -> T) -> Matrix<T> {
    Matrix::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|&x| f(x)).collect()).unwrap()
}

fn zip<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
