//! Explicit softmax attention over a local window of frames.

use std::collections::VecDeque;

use super::AttentionParams;
use crate::error::{Error, Result};
use crate::numerics::{dot, flops, matmul, softmax_in_place, Matrix, Real};

/// Softmax attention of one query head over `keys`/`values`, listed oldest
/// first. `bias[j]` is added to the scaled logit of key `j`.
///
/// The batch and streaming paths both funnel through here, so their
/// arithmetic matches term for term.
pub(crate) fn attend_head<T: Real>(
    q: &[T],
    keys: &[&[T]],
    values: &[&[T]],
    bias: &[T],
    scale: T,
    scratch: &mut Vec<T>,
    out: &mut [T],
) {
    let w = keys.len();
    let hd = q.len();
    scratch.clear();
    for (k, &b) in keys.iter().zip(bias) {
        scratch.push(dot(q, k) * scale + b);
    }
    softmax_in_place(scratch);
    out.iter_mut().for_each(|o| *o = T::zero());
    for (v, &p) in values.iter().zip(scratch.iter()) {
        for (o, &vv) in out.iter_mut().zip(v.iter()) {
            *o += p * vv;
        }
    }
    // dot, scale, bias, weighted sum (softmax counts itself)
    flops::add((w * (2 * hd) + 2 * w + 2 * w * hd) as u64);
}

pub(crate) fn logit_scale<T: Real>(head_dim: usize) -> T {
    T::one() / T::of(head_dim as f64).sqrt()
}

/// Attention where row `t` sees rows `t-left..=t+right` (clipped to the
/// sequence), with per-head relative-position bias indexed by
/// `t - j + right`.
pub fn explicit_windowed_attention<T: Real>(
    x: &Matrix<T>,
    params: &AttentionParams<T>,
    left: usize,
    right: usize,
) -> Result<Matrix<T>> {
    params.validate()?;
    let d = params.model_dim();
    if x.cols() != d {
        return Err(Error::shape(
            "explicit_attention",
            x.shape(),
            params.wq.shape(),
        ));
    }
    if params.relpos_bias.cols() != left + right + 1 {
        return Err(Error::shape(
            "relpos_bias",
            params.relpos_bias.shape(),
            (params.heads, left + right + 1),
        ));
    }
    let t_len = x.rows();
    let hd = params.head_dim();
    let q = matmul(x, &params.wq)?;
    let k = matmul(x, &params.wk)?;
    let v = matmul(x, &params.wv)?;
    let scale = logit_scale::<T>(hd);

    let mut ctx = Matrix::zeros(t_len, d);
    let mut scratch = Vec::new();
    let mut keys = Vec::new();
    let mut vals = Vec::new();
    let mut bias = Vec::new();
    for t in 0..t_len {
        let lo = t.saturating_sub(left);
        let hi = (t + right).min(t_len - 1);
        for h in 0..params.heads {
            let cols = h * hd..(h + 1) * hd;
            keys.clear();
            vals.clear();
            bias.clear();
            let brow = params.relpos_bias.row(h);
            for j in lo..=hi {
                keys.push(&k.row(j)[cols.clone()]);
                vals.push(&v.row(j)[cols.clone()]);
                bias.push(brow[t + right - j]);
            }
            let mut out = vec![T::zero(); hd];
            attend_head(
                &q.row(t)[cols.clone()],
                &keys,
                &vals,
                &bias,
                scale,
                &mut scratch,
                &mut out,
            );
            ctx.row_mut(t)[cols].copy_from_slice(&out);
        }
    }
    matmul(&ctx, &params.wo)
}

/// Local causal attention: row `t` attends to rows `max(0, t-left)..=t`.
pub fn explicit_local_causal_attention<T: Real>(
    x: &Matrix<T>,
    params: &AttentionParams<T>,
    left: usize,
) -> Result<Matrix<T>> {
    explicit_windowed_attention(x, params, left, 0)
}

/// Per-head ring buffer of the last `window` projected keys and values.
#[derive(Clone, Debug)]
pub struct LocalKVCache<T> {
    window: usize,
    keys: VecDeque<Vec<T>>,
    values: VecDeque<Vec<T>>,
}

impl<T: Real> LocalKVCache<T> {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            keys: VecDeque::with_capacity(window),
            values: VecDeque::with_capacity(window),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Attends `q` over the cached frames plus the current `(k, v)`, then
    /// inserts the current frame, evicting the oldest beyond `window`.
    pub(crate) fn attend_and_push(
        &mut self,
        q: &[T],
        k: &[T],
        v: &[T],
        relpos: &[T],
        scale: T,
        scratch: &mut Vec<T>,
        out: &mut [T],
    ) {
        let n = self.keys.len();
        let mut keys: Vec<&[T]> = self.keys.iter().map(|r| r.as_slice()).collect();
        let mut vals: Vec<&[T]> = self.values.iter().map(|r| r.as_slice()).collect();
        keys.push(k);
        vals.push(v);
        let bias: Vec<T> = (0..=n).map(|i| relpos[n - i]).collect();
        attend_head(q, &keys, &vals, &bias, scale, scratch, out);

        if self.window == 0 {
            return;
        }
        if n == self.window {
            self.keys.pop_front();
            self.values.pop_front();
        }
        self.keys.push_back(k.to_vec());
        self.values.push_back(v.to_vec());
    }
}
