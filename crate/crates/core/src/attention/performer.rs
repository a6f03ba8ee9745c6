//! Linear attention through kernel feature maps.
//!
//! With `Q′ = φ(Q)` and `K′ = φ(K)` the bidirectional form is
//! `D⁻¹ Q′((K′)ᵀ V)` and the causal form is the row-normalized
//! `tril(Q′(K′)ᵀ) V`. The causal form is evaluated as a running prefix sum
//! of outer products `φ(k_j) [v_j, 1]ᵀ`, so no `T × T` matrix ever exists
//! and a stream can be advanced one frame at a time.

use super::{feature_map, AttentionParams, KernelSpec};
use crate::error::{Error, Result};
use crate::numerics::{flops, matmul, Matrix, Real};

/// Deliberate corruption of the prefix-sum read, used to prove that the
/// self-checks can fail. Scoped to the calling thread.
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static SKIP_NORMALIZATION: Cell<bool> = const { Cell::new(false) };
    }

    pub fn set_skip_normalization(on: bool) {
        SKIP_NORMALIZATION.with(|c| c.set(on));
    }

    pub(crate) fn skip_normalization() -> bool {
        SKIP_NORMALIZATION.with(Cell::get)
    }
}

/// Default floor for attention normalizers.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Replaces `|den| < eps` by `sign(den)·eps`, with `sign(0) = +1`.
#[inline]
pub fn clamp_denominator<T: Real>(den: T, eps: T) -> T {
    if den.abs() < eps {
        if den < T::zero() {
            -eps
        } else {
            eps
        }
    } else {
        den
    }
}

/// Running sum `Σ_j φ(k_j) [v_j, 1]ᵀ` of shape `r × (head_dim + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixSumState<T> {
    g: Matrix<T>,
    frames_seen: usize,
}

impl<T: Real> PrefixSumState<T> {
    pub fn new(feature_dim: usize, head_dim: usize) -> Self {
        Self {
            g: Matrix::zeros(feature_dim, head_dim + 1),
            frames_seen: 0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.g.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.g.cols() - 1
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// The accumulator; the last column holds `Σ φ(k_j)`.
    pub fn accumulator(&self) -> &Matrix<T> {
        &self.g
    }

    /// Number of scalars in the accumulator.
    pub fn len(&self) -> usize {
        self.g.rows() * self.g.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, q: &[T], k: &[T], v: &[T]) -> Result<()> {
        if q.len() != self.feature_dim() || k.len() != self.feature_dim() {
            return Err(Error::shape(
                "prefix_sum_step",
                self.g.shape(),
                (q.len(), k.len()),
            ));
        }
        if v.len() != self.head_dim() {
            return Err(Error::shape("prefix_sum_step", self.g.shape(), v.len()));
        }
        Ok(())
    }

    fn absorb(&mut self, k: &[T], v: &[T]) {
        let hd = v.len();
        for (l, &kl) in k.iter().enumerate() {
            let row = self.g.row_mut(l);
            for (g, &vv) in row[..hd].iter_mut().zip(v) {
                *g += kl * vv;
            }
            row[hd] += kl;
        }
        self.frames_seen += 1;
        flops::add((2 * k.len() * (hd + 1)) as u64);
    }

    fn read(&self, q: &[T], eps: T, out: &mut [T]) {
        let hd = out.len();
        out.iter_mut().for_each(|o| *o = T::zero());
        let mut den = T::zero();
        for (l, &ql) in q.iter().enumerate() {
            let row = self.g.row(l);
            for (o, &g) in out.iter_mut().zip(&row[..hd]) {
                *o += ql * g;
            }
            den += ql * row[hd];
        }
        let den = if fault::skip_normalization() {
            T::one()
        } else {
            clamp_denominator(den, eps)
        };
        for o in out.iter_mut() {
            *o /= den;
        }
        flops::add((2 * q.len() * (hd + 1) + hd) as u64);
    }
}

/// Advances the prefix sum by one frame and reads the attention output for
/// that frame's query features.
pub fn performer_causal_step<T: Real>(
    state: &mut PrefixSumState<T>,
    q_feat: &[T],
    k_feat: &[T],
    v: &[T],
    eps: T,
) -> Result<Vec<T>> {
    state.check(q_feat, k_feat, v)?;
    state.absorb(k_feat, v);
    let mut out = vec![T::zero(); v.len()];
    state.read(q_feat, eps, &mut out);
    Ok(out)
}

fn check_inputs<T: Real>(qp: &Matrix<T>, kp: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    if qp.shape() != kp.shape() || qp.rows() != v.rows() {
        return Err(Error::shape("performer", qp.shape(), kp.shape()));
    }
    Ok(())
}

/// Causal linear attention via prefix sums: `O(T·r·head_dim)` time and
/// `O(r·head_dim)` working memory.
pub fn performer_causal<T: Real>(
    qp: &Matrix<T>,
    kp: &Matrix<T>,
    v: &Matrix<T>,
    eps: T,
) -> Result<Matrix<T>> {
    check_inputs(qp, kp, v)?;
    let mut state = PrefixSumState::new(qp.cols(), v.cols());
    let mut out = Matrix::zeros(v.rows(), v.cols());
    for i in 0..v.rows() {
        state.absorb(kp.row(i), v.row(i));
        state.read(qp.row(i), eps, out.row_mut(i));
    }
    Ok(out)
}

/// Bidirectional linear attention `D⁻¹ (Q′ ((K′)ᵀ [V, 1]))`.
pub fn performer_bidirectional<T: Real>(
    qp: &Matrix<T>,
    kp: &Matrix<T>,
    v: &Matrix<T>,
    eps: T,
) -> Result<Matrix<T>> {
    check_inputs(qp, kp, v)?;
    let hd = v.cols();
    let mut c = Matrix::filled(v.rows(), hd + 1, T::one());
    c.set_columns(0, v);
    let kv = matmul(&kp.transpose(), &c)?;
    let num = matmul(qp, &kv)?;
    let mut out = Matrix::zeros(v.rows(), hd);
    for i in 0..v.rows() {
        let row = num.row(i);
        let den = clamp_denominator(row[hd], eps);
        for (o, &n) in out.row_mut(i).iter_mut().zip(&row[..hd]) {
            *o = n / den;
        }
    }
    flops::add((v.rows() * hd) as u64);
    Ok(out)
}

/// Multi-head linear attention layer: project, map `q` and `k` through the
/// kernel features, attend per head, concatenate, project by `Wo`.
/// Carries no relative-position bias.
pub fn performer_attention<T: Real>(
    x: &Matrix<T>,
    params: &AttentionParams<T>,
    spec: &KernelSpec<T>,
    causal: bool,
    eps: T,
) -> Result<Matrix<T>> {
    params.validate()?;
    spec.validate()?;
    let d = params.model_dim();
    if x.cols() != d {
        return Err(Error::shape(
            "performer_attention",
            x.shape(),
            params.wq.shape(),
        ));
    }
    let hd = params.head_dim();
    let q = matmul(x, &params.wq)?;
    let k = matmul(x, &params.wk)?;
    let v = matmul(x, &params.wv)?;
    let mut ctx = Matrix::zeros(x.rows(), d);
    for h in 0..params.heads {
        let cols = h * hd..(h + 1) * hd;
        let qp = feature_map(&q.columns(cols.clone()), spec)?;
        let kp = feature_map(&k.columns(cols.clone()), spec)?;
        let vh = v.columns(cols);
        let out = if causal {
            performer_causal(&qp, &kp, &vh, eps)?
        } else {
            performer_bidirectional(&qp, &kp, &vh, eps)?
        };
        ctx.set_columns(h * hd, &out);
    }
    matmul(&ctx, &params.wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::reference::dense_kernel_attention;
    use crate::attention::KernelKind;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn positive(rng: &mut Rng, rows: usize, cols: usize) -> Matrix<f64> {
        rng.normal_matrix::<f64>(rows, cols, 1.0)
            .map(|v| v.abs() + 0.1)
    }

    #[test]
    fn single_frame_returns_value() {
        let mut rng = Rng::new(1);
        let qp = positive(&mut rng, 1, 4);
        let kp = positive(&mut rng, 1, 4);
        let v = rng.normal_matrix::<f64>(1, 3, 1.0);
        let c = performer_causal(&qp, &kp, &v, 1e-6).unwrap();
        let b = performer_bidirectional(&qp, &kp, &v, 1e-6).unwrap();
        assert!(c.max_abs_diff(&v) < 1e-15);
        assert!(b.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn all_ones_features_average_values() {
        let mut rng = Rng::new(2);
        let t_len = 9;
        let ones = Matrix::<f64>::filled(t_len, 4, 1.0);
        let v = rng.normal_matrix::<f64>(t_len, 3, 1.0);
        let c = performer_causal(&ones, &ones, &v, 1e-6).unwrap();
        let b = performer_bidirectional(&ones, &ones, &v, 1e-6).unwrap();
        for i in 0..t_len {
            for col in 0..3 {
                let run = (0..=i).map(|j| v[(j, col)]).sum::<f64>() / (i + 1) as f64;
                let all = (0..t_len).map(|j| v[(j, col)]).sum::<f64>() / t_len as f64;
                assert!((c[(i, col)] - run).abs() < 1e-12);
                assert!((b[(i, col)] - all).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_dense_oracles() {
        let mut rng = Rng::new(3);
        let qp = positive(&mut rng, 32, 8);
        let kp = positive(&mut rng, 32, 8);
        let v = rng.normal_matrix::<f64>(32, 5, 1.0);
        let c = performer_causal(&qp, &kp, &v, 1e-6).unwrap();
        let b = performer_bidirectional(&qp, &kp, &v, 1e-6).unwrap();
        assert!(c.max_rel_diff(&dense_kernel_attention(&qp, &kp, &v, true, 1e-6).unwrap()) < 1e-6);
        assert!(b.max_rel_diff(&dense_kernel_attention(&qp, &kp, &v, false, 1e-6).unwrap()) < 1e-6);
    }

    #[test]
    fn fresh_step_returns_value() {
        let mut s = PrefixSumState::<f64>::new(3, 2);
        let out = performer_causal_step(
            &mut s,
            &[0.5, 1.0, 2.0],
            &[1.0, 0.2, 0.3],
            &[4.0, -1.0],
            1e-6,
        )
        .unwrap();
        assert!((out[0] - 4.0).abs() < 1e-15 && (out[1] + 1.0).abs() < 1e-15);
        assert_eq!(s.frames_seen(), 1);
    }

    #[test]
    fn zero_key_leaves_accumulator() {
        let mut s = PrefixSumState::<f64>::new(2, 2);
        performer_causal_step(&mut s, &[1.0, 1.0], &[1.0, 2.0], &[3.0, 4.0], 1e-6).unwrap();
        let before = s.accumulator().clone();
        let out =
            performer_causal_step(&mut s, &[1.0, 1.0], &[0.0, 0.0], &[9.0, 9.0], 1e-6).unwrap();
        assert_eq!(s.accumulator(), &before);
        assert_eq!(s.frames_seen(), 2);
        assert_eq!(out, vec![3.0, 4.0]);

        // Nothing accumulated: numerator 0 over clamped denominator.
        let mut empty = PrefixSumState::<f64>::new(2, 2);
        let out =
            performer_causal_step(&mut empty, &[1.0, 1.0], &[0.0, 0.0], &[9.0, 9.0], 1e-6).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn step_rejects_bad_dims() {
        let mut s = PrefixSumState::<f64>::new(2, 2);
        assert!(performer_causal_step(&mut s, &[1.0], &[1.0, 1.0], &[1.0, 1.0], 1e-6).is_err());
        assert!(performer_causal_step(&mut s, &[1.0, 1.0], &[1.0, 1.0], &[1.0], 1e-6).is_err());
    }

    #[test]
    fn fold_of_steps_equals_batch() {
        let mut rng = Rng::new(4);
        let qp = positive(&mut rng, 32, 6);
        let kp = positive(&mut rng, 32, 6);
        let v = rng.normal_matrix::<f64>(32, 4, 1.0);
        let batch = performer_causal(&qp, &kp, &v, 1e-6).unwrap();
        let mut s = PrefixSumState::new(6, 4);
        for i in 0..32 {
            let out = performer_causal_step(&mut s, qp.row(i), kp.row(i), v.row(i), 1e-6).unwrap();
            assert_eq!(out.as_slice(), batch.row(i));
        }

        let (q32, k32, v32) = (qp.cast::<f32>(), kp.cast::<f32>(), v.cast::<f32>());
        let batch32 = performer_causal(&q32, &k32, &v32, 1e-6).unwrap();
        let mut s = PrefixSumState::new(6, 4);
        for i in 0..32 {
            let out =
                performer_causal_step(&mut s, q32.row(i), k32.row(i), v32.row(i), 1e-6).unwrap();
            for (a, b) in out.iter().zip(batch32.row(i)) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn clamp_keeps_sign() {
        assert_eq!(clamp_denominator(0.0, 1e-6), 1e-6);
        assert_eq!(clamp_denominator(-1e-9, 1e-6), -1e-6);
        assert_eq!(clamp_denominator(2.0, 1e-6), 2.0);
    }

    #[test]
    fn layer_single_frame_and_causality() {
        let mut rng = Rng::new(6);
        let d = 8;
        let mut params = AttentionParams::<f64>::identity(d, 2, 0);
        params.wq = rng.normal_matrix(d, d, 0.5);
        params.wk = rng.normal_matrix(d, d, 0.5);
        params.wv = rng.normal_matrix(d, d, 0.5);
        let spec = KernelSpec::with_affine(
            KernelKind::Relu,
            rng.normal_matrix(4, 4, 0.5),
            rng.normal_vec(4, 0.5),
        )
        .unwrap();

        let x1 = rng.normal_matrix::<f64>(1, d, 1.0);
        let positive = KernelSpec::plain(KernelKind::Exp);
        let y1 = performer_attention(&x1, &params, &positive, true, 1e-6).unwrap();
        let want = matmul(&x1, &params.wv).unwrap();
        assert!(y1.max_abs_diff(&want) < 1e-12);

        let x = rng.normal_matrix::<f64>(10, d, 1.0);
        let y = performer_attention(&x, &params, &spec, true, 1e-6).unwrap();
        let mut x2 = x.clone();
        for t in 1..10 {
            x2.row_mut(t).iter_mut().for_each(|v| *v += 1.0);
        }
        let y2 = performer_attention(&x2, &params, &spec, true, 1e-6).unwrap();
        assert_eq!(y.row(0), y2.row(0));
    }

    #[test]
    fn layer_bidirectional_matches_dense() {
        let mut rng = Rng::new(7);
        let d = 8;
        let mut params = AttentionParams::<f64>::identity(d, 2, 0);
        params.wq = rng.normal_matrix(d, d, 0.5);
        params.wk = rng.normal_matrix(d, d, 0.5);
        params.wv = rng.normal_matrix(d, d, 0.5);
        params.wo = rng.normal_matrix(d, d, 0.5);
        let spec = KernelSpec::plain(KernelKind::Exp);
        let x = rng.normal_matrix::<f64>(16, d, 1.0);
        let got = performer_attention(&x, &params, &spec, false, 1e-6).unwrap();

        let q = matmul(&x, &params.wq).unwrap();
        let k = matmul(&x, &params.wk).unwrap();
        let v = matmul(&x, &params.wv).unwrap();
        let mut ctx = Matrix::zeros(16, d);
        for h in 0..2 {
            let cols = h * 4..(h + 1) * 4;
            let qp = q.columns(cols.clone()).map(f64::exp);
            let kp = k.columns(cols.clone()).map(f64::exp);
            let o = dense_kernel_attention(&qp, &kp, &v.columns(cols), false, 1e-6).unwrap();
            ctx.set_columns(h * 4, &o);
        }
        let want = matmul(&ctx, &params.wo).unwrap();
        assert!(got.max_rel_diff(&want) < 1e-6);
    }

    proptest! {
        #[test]
        fn causal_matches_dense_for_every_kernel(seed in any::<u64>(), t_len in 1usize..40, r in 1usize..10, hd in 1usize..8, k in 0usize..5) {
            let kind = KernelKind::ALL[k];
            let mut rng = Rng::new(seed);
            let spec = KernelSpec::plain(kind);
            let qp = feature_map(&rng.normal_matrix::<f64>(t_len, r, 0.7), &spec).unwrap();
            let kp = feature_map(&rng.normal_matrix::<f64>(t_len, r, 0.7), &spec).unwrap();
            let v = rng.normal_matrix::<f64>(t_len, hd, 1.0);
            let got = performer_causal(&qp, &kp, &v, 1e-6).unwrap();
            let want = dense_kernel_attention(&qp, &kp, &v, true, 1e-6).unwrap();
            if kind.is_nonnegative() {
                prop_assert!(got.max_rel_diff(&want) < 1e-6);
            } else {
                prop_assert!(got.all_finite());
            }
        }
    }
}
