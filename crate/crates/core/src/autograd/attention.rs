//! Fused multi-head causal self-attention.
//!
//! Rows are laid out `(sequence, step)`; the `model` columns are split into
//! `heads` contiguous blocks. Query `t` attends to keys `u <= t` whose
//! `key_valid` flag is set. A query with no admissible key outputs zeros.

use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub seqs: usize,
    pub steps: usize,
    pub heads: usize,
}

pub(crate) struct AttentionCache<T> {
    layout: AttentionLayout,
    /// Attention weights, `seqs * heads` blocks of `steps × steps`.
    probs: Vec<T>,
}

fn head_dim(width: usize, heads: usize) -> usize {
    assert_eq!(width % heads, 0, "model width {width} not divisible by {heads} heads");
    width / heads
}

pub(crate) fn forward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    layout: AttentionLayout,
    key_valid: Rc<Vec<bool>>,
) -> (Matrix<T>, AttentionCache<T>) {
    let AttentionLayout { seqs, steps, heads } = layout;
    let width = q.cols();
    assert_eq!(q.rows(), seqs * steps, "attention rows");
    assert_eq!(k.shape(), q.shape(), "attention key shape");
    assert_eq!(v.shape(), q.shape(), "attention value shape");
    assert_eq!(key_valid.len(), seqs * steps, "attention mask length");
    let dh = head_dim(width, heads);
    let scale = T::one() / T::of(dh as f64).sqrt();
    let ld = width as isize;

    let mut probs = vec![T::zero(); seqs * heads * steps * steps];
    let mut out = Matrix::zeros(q.rows(), width);
    let mut scores = vec![T::zero(); steps * steps];
    let mut head_out = vec![T::zero(); steps * dh];

    for s in 0..seqs {
        let base = s * steps * width;
        let valid = &key_valid[s * steps..(s + 1) * steps];
        for h in 0..heads {
            let off = base + h * dh;
            // scores = Q_h K_hᵀ * scale
            T::gemm(
                steps,
                dh,
                steps,
                scale,
                &q.data()[off..],
                (ld, 1),
                &k.data()[off..],
                (1, ld),
                T::zero(),
                &mut scores,
            );
            let p = &mut probs[(s * heads + h) * steps * steps..(s * heads + h + 1) * steps * steps];
            for t in 0..steps {
                let row = &scores[t * steps..(t + 1) * steps];
                let mut max = T::neg_infinity();
                for u in 0..=t {
                    if valid[u] {
                        max = max.max(row[u]);
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut total = T::zero();
                let prow = &mut p[t * steps..(t + 1) * steps];
                for u in 0..=t {
                    if valid[u] {
                        let e = (row[u] - max).exp();
                        prow[u] = e;
                        total += e;
                    }
                }
                for x in prow[..=t].iter_mut() {
                    *x /= total;
                }
            }
            // out_h = P V_h
            T::gemm(
                steps,
                steps,
                dh,
                T::one(),
                p,
                (steps as isize, 1),
                &v.data()[off..],
                (ld, 1),
                T::zero(),
                &mut head_out,
            );
            for t in 0..steps {
                out.row_mut(s * steps + t)[h * dh..(h + 1) * dh].copy_from_slice(&head_out[t * dh..(t + 1) * dh]);
            }
        }
    }
    (out, AttentionCache { layout, probs })
}

pub(crate) fn backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    cache: &AttentionCache<T>,
    grad: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let AttentionLayout { seqs, steps, heads } = cache.layout;
    let width = q.cols();
    let dh = head_dim(width, heads);
    let scale = T::one() / T::of(dh as f64).sqrt();

    let mut dq = Matrix::zeros(q.rows(), width);
    let mut dk = Matrix::zeros(q.rows(), width);
    let mut dv = Matrix::zeros(q.rows(), width);

    let mut go = vec![T::zero(); steps * dh];
    let mut qh = vec![T::zero(); steps * dh];
    let mut kh = vec![T::zero(); steps * dh];
    let mut vh = vec![T::zero(); steps * dh];
    let mut dp = vec![T::zero(); steps * steps];
    let mut tmp = vec![T::zero(); steps * dh];

    let copy_head = |m: &Matrix<T>, s: usize, h: usize, dst: &mut [T]| {
        for t in 0..steps {
            dst[t * dh..(t + 1) * dh].copy_from_slice(&m.row(s * steps + t)[h * dh..(h + 1) * dh]);
        }
    };
    let add_head = |m: &mut Matrix<T>, s: usize, h: usize, src: &[T]| {
        for t in 0..steps {
            for (o, &x) in m.row_mut(s * steps + t)[h * dh..(h + 1) * dh]
                .iter_mut()
                .zip(&src[t * dh..(t + 1) * dh])
            {
                *o += x;
            }
        }
    };
    let rm = |n: usize| (n as isize, 1isize);
    let cm = |n: usize| (1isize, n as isize);

    for s in 0..seqs {
        for h in 0..heads {
            let p = &cache.probs[(s * heads + h) * steps * steps..(s * heads + h + 1) * steps * steps];
            copy_head(grad, s, h, &mut go);
            copy_head(q, s, h, &mut qh);
            copy_head(k, s, h, &mut kh);
            copy_head(v, s, h, &mut vh);

            // dV = Pᵀ dO
            T::gemm(
                steps,
                steps,
                dh,
                T::one(),
                p,
                cm(steps),
                &go,
                rm(dh),
                T::zero(),
                &mut tmp,
            );
            add_head(&mut dv, s, h, &tmp);

            // dP = dO Vᵀ
            T::gemm(steps, dh, steps, T::one(), &go, rm(dh), &vh, cm(dh), T::zero(), &mut dp);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for t in 0..steps {
                let prow = &p[t * steps..(t + 1) * steps];
                let drow = &mut dp[t * steps..(t + 1) * steps];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pp) in drow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot);
                }
            }
            // dQ = dS K * scale ; dK = dSᵀ Q * scale
            T::gemm(
                steps,
                steps,
                dh,
                scale,
                &dp,
                rm(steps),
                &kh,
                rm(dh),
                T::zero(),
                &mut tmp,
            );
            add_head(&mut dq, s, h, &tmp);
            T::gemm(
                steps,
                steps,
                dh,
                scale,
                &dp,
                cm(steps),
                &qh,
                rm(dh),
                T::zero(),
                &mut tmp,
            );
            add_head(&mut dk, s, h, &tmp);
        }
    }
    (dq, dk, dv)
}
