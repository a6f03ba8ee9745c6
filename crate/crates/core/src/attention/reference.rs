//! Quadratic reference implementations that materialize attention
//! weights explicitly. They share no code path with the linear-time
//! versions and serve as their oracles (and as the quadratic baseline in
//! benchmarks).

use super::performer::clamp_denominator;
use super::AttentionParams;
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_bt, softmax_rows, Matrix, Real};

/// Builds `A = Q′(K′)ᵀ`, applies `tril` when `causal`, normalizes each row
/// by its sum (with the usual clamp) and returns `A V`.
pub fn dense_kernel_attention<T: Real>(
    qp: &Matrix<T>,
    kp: &Matrix<T>,
    v: &Matrix<T>,
    causal: bool,
    eps: T,
) -> Result<Matrix<T>> {
    let mut a = matmul_bt(qp, kp)?;
    let t_len = a.rows();
    for i in 0..t_len {
        let row = a.row_mut(i);
        if causal {
            row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
        }
        let den = clamp_denominator(row.iter().copied().fold(T::zero(), |s, x| s + x), eps);
        row.iter_mut().for_each(|x| *x /= den);
    }
    matmul(&a, v)
}

/// Causal kernel attention computed one query row at a time against every
/// earlier key: `O(T²)` time, `O(T)` extra memory.
pub fn causal_kernel_attention_quadratic<T: Real>(
    qp: &Matrix<T>,
    kp: &Matrix<T>,
    v: &Matrix<T>,
    eps: T,
) -> Result<Matrix<T>> {
    if qp.shape() != kp.shape() || qp.rows() != v.rows() {
        return Err(Error::shape("quadratic_attention", qp.shape(), kp.shape()));
    }
    let mut out = Matrix::zeros(v.rows(), v.cols());
    let mut weights = Vec::with_capacity(v.rows());
    for i in 0..v.rows() {
        weights.clear();
        let q = qp.row(i);
        for j in 0..=i {
            let k = kp.row(j);
            weights.push(q.iter().zip(k).fold(T::zero(), |s, (&a, &b)| s + a * b));
        }
        let den = clamp_denominator(weights.iter().fold(T::zero(), |s, &w| s + w), eps);
        let orow = out.row_mut(i);
        for (j, &w) in weights.iter().enumerate() {
            for (o, &vv) in orow.iter_mut().zip(v.row(j)) {
                *o += w * vv;
            }
        }
        orow.iter_mut().for_each(|o| *o /= den);
    }
    Ok(out)
}

/// Multi-head softmax attention over the full `T × T` logit matrix with
/// `-∞` outside the band `j ∈ [t-left, t+right]` and relative-position bias
/// `relpos_bias[h][t - j + right]` inside it.
pub fn dense_masked_softmax_attention<T: Real>(
    x: &Matrix<T>,
    params: &AttentionParams<T>,
    left: usize,
    right: usize,
) -> Result<Matrix<T>> {
    params.validate()?;
    let t_len = x.rows();
    let hd = params.head_dim();
    let q = matmul(x, &params.wq)?;
    let k = matmul(x, &params.wk)?;
    let v = matmul(x, &params.wv)?;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut ctx = Matrix::zeros(t_len, params.model_dim());
    for h in 0..params.heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = q.columns(cols.clone());
        let kh = k.columns(cols.clone());
        let vh = v.columns(cols);
        let mut logits = matmul_bt(&qh, &kh)?;
        for t in 0..t_len {
            for j in 0..t_len {
                let inside = j + left >= t && j <= t + right;
                logits[(t, j)] = if inside {
                    logits[(t, j)] * scale + params.relpos_bias[(h, t + right - j)]
                } else {
                    T::neg_infinity()
                };
            }
        }
        let weights = softmax_rows(&logits);
        ctx.set_columns(h * hd, &matmul(&weights, &vh)?);
    }
    matmul(&ctx, &params.wo)
}
