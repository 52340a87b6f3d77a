//! Spatial self-attention primitives: affinity scores, row softmax and the
//! value aggregation. Feature maps are treated as matrices over flattened
//! spatial positions.

use super::{make_op, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::sync::Arc;

impl<T: Scalar> Tensor<T> {
    /// Pairwise query-key affinities over spatial positions.
    ///
    /// `self` and `key` are `(b, d, h, w)`; the result is `(b, 1, n, n)`
    /// with `n = h * w` and `out[i][j] = sum_d q[d][i] * k[d][j]`.
    pub fn attention_scores(&self, key: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != key.shape() {
            return Err(Error::shape(
                "attention_scores",
                format!("query {} and key {} must match", self.shape(), key.shape()),
            ));
        }
        let sh = self.shape();
        let (b, d, n) = (sh.batch(), sh.channels(), sh.height() * sh.width());
        let out_shape = Shape::new(b, 1, n, n);
        let q = Arc::new(self.to_vec());
        let k = Arc::new(key.to_vec());
        let mut scores = vec![T::zero(); out_shape.numel()];
        for bi in 0..b {
            let qb = &q[bi * d * n..(bi + 1) * d * n];
            let kb = &k[bi * d * n..(bi + 1) * d * n];
            let sb = &mut scores[bi * n * n..(bi + 1) * n * n];
            // q^T (n x d) . k (d x n)
            T::gemm_strided(
                n,
                d,
                n,
                T::one(),
                qb,
                1,
                n as isize,
                kb,
                n as isize,
                1,
                T::zero(),
                sb,
                n as isize,
                1,
            );
        }
        Ok(make_op(&[self, key], out_shape, scores, move |up| {
            let mut dq = vec![T::zero(); b * d * n];
            let mut dk = vec![T::zero(); b * d * n];
            for bi in 0..b {
                let ub = &up[bi * n * n..(bi + 1) * n * n];
                let qb = &q[bi * d * n..(bi + 1) * d * n];
                let kb = &k[bi * d * n..(bi + 1) * d * n];
                // dq (d x n) = k (d x n) . up^T (n x n)
                T::gemm_strided(
                    d,
                    n,
                    n,
                    T::one(),
                    kb,
                    n as isize,
                    1,
                    ub,
                    1,
                    n as isize,
                    T::zero(),
                    &mut dq[bi * d * n..(bi + 1) * d * n],
                    n as isize,
                    1,
                );
                // dk (d x n) = q (d x n) . up (n x n)
                T::gemm_strided(
                    d,
                    n,
                    n,
                    T::one(),
                    qb,
                    n as isize,
                    1,
                    ub,
                    n as isize,
                    1,
                    T::zero(),
                    &mut dk[bi * d * n..(bi + 1) * d * n],
                    n as isize,
                    1,
                );
            }
            vec![Some(dq), Some(dk)]
        }))
    }

    /// Numerically stable softmax over the last extent, row by row.
    pub fn softmax_rows(&self) -> Tensor<T> {
        let sh = self.shape();
        let m = sh.width();
        let rows = sh.numel() / m.max(1);
        let mut out = vec![T::zero(); sh.numel()];
        for r in 0..rows {
            let src = &self.data()[r * m..(r + 1) * m];
            let dst = &mut out[r * m..(r + 1) * m];
            let max = src.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d = *d / sum;
            }
        }
        let probs = Arc::new(out.clone());
        make_op(&[self], sh, out, move |up| {
            let mut ds = vec![T::zero(); probs.len()];
            for r in 0..rows {
                let a = &probs[r * m..(r + 1) * m];
                let u = &up[r * m..(r + 1) * m];
                let dot: T = a.iter().zip(u).map(|(&av, &uv)| av * uv).sum();
                for (d, (&av, &uv)) in ds[r * m..(r + 1) * m].iter_mut().zip(a.iter().zip(u)) {
                    *d = av * (uv - dot);
                }
            }
            vec![Some(ds)]
        })
    }

    /// Aggregates values with an affinity matrix: `self` is `(b, c, h, w)`,
    /// `affinity` is `(b, 1, n, n)` with rows over output positions, and
    /// `out[c][i] = sum_j affinity[i][j] * v[c][j]`.
    pub fn attention_apply(&self, affinity: &Tensor<T>) -> Result<Tensor<T>> {
        let vs = self.shape();
        let as_ = affinity.shape();
        let n = vs.height() * vs.width();
        if as_.batch() != vs.batch() || as_.channels() != 1 || as_.height() != n || as_.width() != n {
            return Err(Error::shape(
                "attention_apply",
                format!("affinity {as_} must be ({}, 1, {n}, {n}) for values {vs}", vs.batch()),
            ));
        }
        let (b, c) = (vs.batch(), vs.channels());
        let v = Arc::new(self.to_vec());
        let a = Arc::new(affinity.to_vec());
        let mut out = vec![T::zero(); vs.numel()];
        for bi in 0..b {
            let vb = &v[bi * c * n..(bi + 1) * c * n];
            let ab = &a[bi * n * n..(bi + 1) * n * n];
            // out (c x n) = v (c x n) . a^T (n x n)
            T::gemm_strided(
                c,
                n,
                n,
                T::one(),
                vb,
                n as isize,
                1,
                ab,
                1,
                n as isize,
                T::zero(),
                &mut out[bi * c * n..(bi + 1) * c * n],
                n as isize,
                1,
            );
        }
        Ok(make_op(&[self, affinity], vs, out, move |up| {
            let mut dv = vec![T::zero(); b * c * n];
            let mut da = vec![T::zero(); b * n * n];
            for bi in 0..b {
                let ub = &up[bi * c * n..(bi + 1) * c * n];
                let ab = &a[bi * n * n..(bi + 1) * n * n];
                let vb = &v[bi * c * n..(bi + 1) * c * n];
                // dv (c x n) = up (c x n) . a (n x n)
                T::gemm_strided(
                    c,
                    n,
                    n,
                    T::one(),
                    ub,
                    n as isize,
                    1,
                    ab,
                    n as isize,
                    1,
                    T::zero(),
                    &mut dv[bi * c * n..(bi + 1) * c * n],
                    n as isize,
                    1,
                );
                // da (n x n) = up^T (n x c) . v (c x n)
                T::gemm_strided(
                    n,
                    c,
                    n,
                    T::one(),
                    ub,
                    1,
                    n as isize,
                    vb,
                    n as isize,
                    1,
                    T::zero(),
                    &mut da[bi * n * n..(bi + 1) * n * n],
                    n as isize,
                    1,
                );
            }
            vec![Some(dv), Some(da)]
        }))
    }
}
