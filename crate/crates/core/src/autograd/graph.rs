//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! topological order, so the backward sweep is a single reverse scan.

use std::collections::HashMap;
use std::rc::Rc;

use crate::autograd::attention::{self, AttentionCache, AttentionLayout};
use crate::autograd::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Constant,
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Abs(Var),
    Clamp(Var, T, T),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    L2NormalizeRows(Var, Vec<T>),
    LayerNormRows(Var, Vec<T>),
    CumsumGroups(Var, CumsumLayout),
    GroupMaxRows(Var, usize, Vec<u32>),
    StraightThrough(Var),
    CrossEntropyRows(Var, Rc<Vec<usize>>),
    Attention(Var, Var, Var, Box<AttentionCache<T>>),
}

/// Row layout `(sequence, step, group)` for per-sequence prefix sums.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CumsumLayout {
    pub seqs: usize,
    pub steps: usize,
    pub groups: usize,
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output w.r.t. every parameter and input leaf.
pub struct Gradients<T> {
    leaves: HashMap<usize, Matrix<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params.get(&id).and_then(|v| self.leaves.get(&v.0))
    }

    /// Moves parameter gradients out, indexed by [`ParamId`].
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Matrix<T>>> {
        let mut out: Vec<Option<Matrix<T>>> = (0..n_params).map(|_| None).collect();
        for (id, var) in &self.params {
            out[id.index()] = self.leaves.remove(&var.0);
        }
        out
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        _ if a == b => Some(a),
        (1, n) | (n, 1) => Some(n),
        _ => None,
    }
}

/// Sum `grad` (shape of the broadcast output) down to `shape`.
fn reduce_to<T: Scalar>(grad: &Matrix<T>, shape: (usize, usize)) -> Matrix<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let (r, c) = shape;
    let mut out = Matrix::zeros(r, c);
    for i in 0..grad.rows() {
        let oi = if r == 1 { 0 } else { i };
        for j in 0..grad.cols() {
            let oj = if c == 1 { 0 } else { j };
            let v = out.get(oi, oj) + grad.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

fn binary_broadcast<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let rows = broadcast_dim(a.rows(), b.rows())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let cols = broadcast_dim(a.cols(), b.cols())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let mut out = Matrix::zeros(rows, cols);
    let (ar, ac, br, bc) = (a.rows() == 1, a.cols() == 1, b.rows() == 1, b.cols() == 1);
    for i in 0..rows {
        for j in 0..cols {
            let x = a.get(if ar { 0 } else { i }, if ac { 0 } else { j });
            let y = b.get(if br { 0 } else { i }, if bc { 0 } else { j });
            out.set(i, j, f(x, y));
        }
    }
    out
}

/// Read `m` at output coordinates under broadcasting.
#[inline]
fn bget<T: Scalar>(m: &Matrix<T>, i: usize, j: usize) -> T {
    let r = if m.rows() == 1 { 0 } else { i };
    let c = if m.cols() == 1 { 0 } else { j };
    m.get(r, c)
}

fn row_softmax<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn row_logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

fn softmax_matrix<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        row_softmax(x.row(r), out.row_mut(r));
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "expected a scalar node");
        m.get(0, 0)
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Matrix::scalar(value))
    }

    /// A leaf whose gradient is retained after [`Graph::backward`].
    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Registers a parameter once per graph; later calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- elementwise binary (broadcasting) ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = binary_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = binary_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = binary_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = binary_broadcast(self.value(a), self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Div(a, b), ng)
    }

    // ---- elementwise unary ----

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        let ng = self.ng(a);
        self.push(value, Op::Neg(a), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        let ng = self.ng(a);
        self.push(value, Op::Ln(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        let ng = self.ng(a);
        self.push(value, Op::Abs(a), ng)
    }

    /// Clamp to `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Column sums, `r×c → 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Row sums, `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().copied().sum()).collect();
        let ng = self.ng(a);
        self.push(Matrix::column(data), Op::SumCols(a), ng)
    }

    // ---- linear algebra and shape ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshaped(rows, cols);
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + src.cols()].copy_from_slice(src.row(r));
                off += src.cols();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(src.data());
            rows += src.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// `out[i] = a[idx[i]]`; backward scatters with accumulation.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(idx.len(), x.cols());
        for (i, &src) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(x.row(src));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    // ---- row-wise normalizations ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_matrix(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let lse = row_logsumexp(x.row(r));
            for (o, &v) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                *o = v - lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    /// `r×c → r×1`, stable log Σ exp.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| row_logsumexp(x.row(r))).collect();
        let ng = self.ng(a);
        self.push(Matrix::column(data), Op::LogSumExpRows(a), ng)
    }

    /// Unit 2-norm rows; norms floored at `1e-12`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        let floor = T::of(1e-12);
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            for o in out.row_mut(r) {
                *o /= n;
            }
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2NormalizeRows(a, norms), ng)
    }

    /// Zero-mean unit-variance rows (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let n = T::of(x.cols() as f64);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNormRows(a, inv_std), ng)
    }

    // ---- structured ops ----

    /// Prefix sums over the step axis of a `(seq, step, group)` row layout.
    pub fn cumsum_groups(&mut self, a: Var, layout: CumsumLayout) -> Var {
        let x = self.value(a);
        let CumsumLayout { seqs, steps, groups } = layout;
        assert_eq!(x.rows(), seqs * steps * groups, "cumsum layout mismatch");
        let mut out = x.clone();
        let cols = x.cols();
        for s in 0..seqs {
            for t in 1..steps {
                for j in 0..groups {
                    let prev = (s * steps + t - 1) * groups + j;
                    let cur = (s * steps + t) * groups + j;
                    for c in 0..cols {
                        let v = out.get(prev, c) + out.get(cur, c);
                        out.set(cur, c, v);
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::CumsumGroups(a, layout), ng)
    }

    /// `(r·g)×c → r×c`, elementwise max over each run of `g` consecutive rows.
    pub fn group_max_rows(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows() % group, 0, "group_max_rows: rows not divisible");
        let rows = x.rows() / group;
        let cols = x.cols();
        let mut out = Matrix::zeros(rows, cols);
        let mut arg = vec![0u32; rows * cols];
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(x.row(r * group));
            for j in 1..group {
                let src = x.row(r * group + j);
                let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    if src[c] > dst[c] {
                        dst[c] = src[c];
                        arg[r * cols + c] = j as u32;
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::GroupMaxRows(a, group, arg), ng)
    }

    /// Forward value `hard`, gradient passed straight to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Matrix<T>) -> Var {
        assert_eq!(self.shape(soft), hard.shape(), "straight_through shape");
        let ng = self.ng(soft);
        self.push(hard, Op::StraightThrough(soft), ng)
    }

    /// Per-row `−log softmax(logits)[target]`, shape `r×1`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len(), "one target per row");
        let data = (0..x.rows())
            .map(|r| {
                let t = targets[r];
                assert!(t < x.cols(), "target {t} outside {} classes", x.cols());
                row_logsumexp(x.row(r)) - x.get(r, t)
            })
            .collect();
        let ng = self.ng(logits);
        self.push(Matrix::column(data), Op::CrossEntropyRows(logits, targets), ng)
    }

    /// Multi-head causal self-attention with key padding, fused into one node.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        key_valid: Rc<Vec<bool>>,
    ) -> Var {
        let (out, cache) = attention::forward(self.value(q), self.value(k), self.value(v), layout, key_valid);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention(q, k, v, Box::new(cache)), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        let mut leaves = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Constant => {}
                Op::Input | Op::Param => {
                    leaves.insert(idx, g);
                }
                op => self.backprop(op, &node.value, g, &mut grads),
            }
        }
        Gradients {
            leaves,
            params: self.params.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, op: &Op<T>, out: &Matrix<T>, g: Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match op {
            Op::Constant | Op::Input | Op::Param => unreachable!(),
            Op::Add(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, reduce_to(&g, self.shape(*a)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, reduce_to(&g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, reduce_to(&g, self.shape(*a)));
                }
                if self.ng(*b) {
                    let neg = g.map(|x| -x);
                    self.accumulate(grads, *b, reduce_to(&neg, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let full = self.broadcast_product(&g, bv);
                    self.accumulate(grads, *a, reduce_to(&full, av.shape()));
                }
                if self.ng(*b) {
                    let full = self.broadcast_product(&g, av);
                    self.accumulate(grads, *b, reduce_to(&full, bv.shape()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut full = g.clone();
                    for i in 0..full.rows() {
                        for j in 0..full.cols() {
                            let v = full.get(i, j) / bget(bv, i, j);
                            full.set(i, j, v);
                        }
                    }
                    self.accumulate(grads, *a, reduce_to(&full, av.shape()));
                }
                if self.ng(*b) {
                    // d(a/b)/db = -out / b
                    let mut full = g.clone();
                    for i in 0..full.rows() {
                        for j in 0..full.cols() {
                            let v = -full.get(i, j) * out.get(i, j) / bget(bv, i, j);
                            full.set(i, j, v);
                        }
                    }
                    self.accumulate(grads, *b, reduce_to(&full, bv.shape()));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s))
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |d, y| d * y)),
            Op::Ln(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |d, x| d / x))
            }
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |d, y| d * (T::one() - y * y))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(out, |d, y| d * y * (T::one() - y))),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(x, |d, x| if x > T::zero() { d } else { T::zero() }),
                )
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let two = T::of(2.0);
                self.accumulate(grads, *a, g.zip_map(x, |d, x| two * x * d))
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |d, x| d * x.signum()))
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(x, |d, x| if x < lo || x > hi { T::zero() } else { d }),
                )
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)))
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut full = Matrix::zeros(r, c);
                for i in 0..r {
                    full.row_mut(i).copy_from_slice(g.row(0));
                }
                self.accumulate(grads, *a, full)
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut full = Matrix::zeros(r, c);
                for i in 0..r {
                    let d = g.get(i, 0);
                    full.row_mut(i).fill(d);
                }
                self.accumulate(grads, *a, full)
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(&g));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, g.reshaped(r, c))
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let mut part = Matrix::zeros(r, c);
                        for i in 0..r {
                            part.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.accumulate(grads, p, part);
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut full = Matrix::zeros(r, c);
                let w = g.cols();
                for i in 0..r {
                    full.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, full)
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let part = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        self.accumulate(grads, p, part);
                    }
                    off += r;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut full = Matrix::zeros(r, c);
                for (i, &src) in idx.iter().enumerate() {
                    for (o, &d) in full.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += d;
                    }
                }
                self.accumulate(grads, *a, full)
            }
            Op::SoftmaxRows(a) => {
                let mut dx = g;
                for r in 0..dx.rows() {
                    let y = out.row(r);
                    let dot: T = dx.row(r).iter().zip(y).map(|(&d, &y)| d * y).sum();
                    for (d, &y) in dx.row_mut(r).iter_mut().zip(y) {
                        *d = y * (*d - dot);
                    }
                }
                self.accumulate(grads, *a, dx)
            }
            Op::LogSoftmaxRows(a) => {
                let mut dx = g;
                for r in 0..dx.rows() {
                    let total: T = dx.row(r).iter().copied().sum();
                    for (d, &y) in dx.row_mut(r).iter_mut().zip(out.row(r)) {
                        *d -= y.exp() * total;
                    }
                }
                self.accumulate(grads, *a, dx)
            }
            Op::LogSumExpRows(a) => {
                let mut dx = softmax_matrix(self.value(*a));
                for r in 0..dx.rows() {
                    let d = g.get(r, 0);
                    for v in dx.row_mut(r) {
                        *v *= d;
                    }
                }
                self.accumulate(grads, *a, dx)
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut dx = g;
                for r in 0..dx.rows() {
                    let y = out.row(r);
                    let dot: T = dx.row(r).iter().zip(y).map(|(&d, &y)| d * y).sum();
                    let n = norms[r];
                    for (d, &y) in dx.row_mut(r).iter_mut().zip(y) {
                        *d = (*d - y * dot) / n;
                    }
                }
                self.accumulate(grads, *a, dx)
            }
            Op::LayerNormRows(a, inv_std) => {
                let mut dx = g;
                let n = T::of(dx.cols() as f64);
                for r in 0..dx.rows() {
                    let y = out.row(r);
                    let mean_d = dx.row(r).iter().copied().sum::<T>() / n;
                    let mean_dy = dx.row(r).iter().zip(y).map(|(&d, &y)| d * y).sum::<T>() / n;
                    let is = inv_std[r];
                    for (d, &y) in dx.row_mut(r).iter_mut().zip(y) {
                        *d = is * (*d - mean_d - y * mean_dy);
                    }
                }
                self.accumulate(grads, *a, dx)
            }
            Op::CumsumGroups(a, layout) => {
                let mut dx = g;
                let cols = dx.cols();
                for s in 0..layout.seqs {
                    for t in (0..layout.steps.saturating_sub(1)).rev() {
                        for j in 0..layout.groups {
                            let next = (s * layout.steps + t + 1) * layout.groups + j;
                            let cur = (s * layout.steps + t) * layout.groups + j;
                            for c in 0..cols {
                                let v = dx.get(cur, c) + dx.get(next, c);
                                dx.set(cur, c, v);
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, dx)
            }
            Op::GroupMaxRows(a, group, arg) => {
                let (r, c) = self.shape(*a);
                let mut full = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    for j in 0..c {
                        let src = i * group + arg[i * c + j] as usize;
                        full.set(src, j, g.get(i, j));
                    }
                }
                self.accumulate(grads, *a, full)
            }
            Op::StraightThrough(soft) => self.accumulate(grads, *soft, g),
            Op::CrossEntropyRows(logits, targets) => {
                let mut dx = softmax_matrix(self.value(*logits));
                for r in 0..dx.rows() {
                    let d = g.get(r, 0);
                    let row = dx.row_mut(r);
                    row[targets[r]] -= T::one();
                    for v in row.iter_mut() {
                        *v *= d;
                    }
                }
                self.accumulate(grads, *logits, dx)
            }
            Op::Attention(q, k, v, cache) => {
                let (dq, dk, dv) = attention::backward(self.value(*q), self.value(*k), self.value(*v), cache, &g);
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
        }
    }

    fn broadcast_product(&self, g: &Matrix<T>, other: &Matrix<T>) -> Matrix<T> {
        if g.shape() == other.shape() {
            return g.zip_map(other, |d, o| d * o);
        }
        let mut full = g.clone();
        for i in 0..full.rows() {
            for j in 0..full.cols() {
                let v = full.get(i, j) * bget(other, i, j);
                full.set(i, j, v);
            }
        }
        full
    }
}
