//! Minimal dense numeric kernels shared by every higher module.
//!
//! All functions here are pure and deterministic: the same inputs give
//! bit-identical outputs, and every reduction runs in a fixed order.

pub mod flops;
mod matrix;
mod rng;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

pub use matrix::Matrix;
pub use rng::Rng;

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (benchmark paths)
/// and `f64` (oracle paths).
pub trait Real:
    Float
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn to_bits64(self) -> u64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_bits64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn to_bits64(self) -> u64 {
        self.to_bits()
    }
}

/// Element precision selector for runtime dispatch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `a × b`. Each output element accumulates over the inner index in
/// ascending order, so a row of the product depends only on the matching
/// row of `a`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate() {
            let brow = b.row(p);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    flops::add(2 * (m * k * n) as u64);
    Ok(out)
}

/// `a × bᵀ` without materializing the transpose.
pub fn matmul_bt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::shape("matmul_bt", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out[(i, j)] = dot(a.row(i), b.row(j));
        }
    }
    flops::add(2 * (a.rows() * a.cols() * b.rows()) as u64);
    Ok(out)
}

/// `x × w + bias`, bias broadcast over rows.
pub fn linear<T: Real>(x: &Matrix<T>, w: &Matrix<T>, bias: Option<&[T]>) -> Result<Matrix<T>> {
    let mut y = matmul(x, w)?;
    if let Some(b) = bias {
        add_bias(&mut y, b)?;
    }
    Ok(y)
}

pub fn add_bias<T: Real>(x: &mut Matrix<T>, bias: &[T]) -> Result<()> {
    if bias.len() != x.cols() {
        return Err(Error::shape("add_bias", x.shape(), bias.len()));
    }
    for r in 0..x.rows() {
        for (v, &b) in x.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    flops::add((x.rows() * x.cols()) as u64);
    Ok(())
}

/// `x += scale · y`. A unit scale costs one flop per element, otherwise two.
pub fn residual_add<T: Real>(x: &mut Matrix<T>, y: &Matrix<T>, scale: T) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape("residual_add", x.shape(), y.shape()));
    }
    let unit = scale == T::one();
    for (a, &b) in x.as_mut_slice().iter_mut().zip(y.as_slice()) {
        if unit {
            *a += b;
        } else {
            *a += scale * b;
        }
    }
    let per = if unit { 1 } else { 2 };
    flops::add(per * (x.rows() * x.cols()) as u64);
    Ok(())
}

/// Stable in-place softmax of one vector.
pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    if v.is_empty() {
        return;
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    flops::add(flops::SOFTMAX * v.len() as u64);
}

pub fn softmax_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

fn layernorm_row<T: Real>(row: &mut [T], gamma: &[T], beta: &[T], eps: T) {
    let n = T::of(row.len() as f64);
    let mut mean = T::zero();
    for &v in row.iter() {
        mean += v;
    }
    mean /= n;
    let mut var = T::zero();
    for v in row.iter_mut() {
        *v -= mean;
        var += *v * *v;
    }
    var /= n;
    let inv = T::one() / (var + eps).sqrt();
    for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
        *v = *v * inv * g + b;
    }
}

/// Per-row standardization followed by the affine `gamma`, `beta`.
pub fn layernorm<T: Real>(x: &Matrix<T>, gamma: &[T], beta: &[T], eps: T) -> Result<Matrix<T>> {
    if gamma.len() != x.cols() || beta.len() != x.cols() {
        return Err(Error::shape(
            "layernorm",
            x.shape(),
            (gamma.len(), beta.len()),
        ));
    }
    if !(eps > T::zero()) {
        return Err(Error::config("layernorm eps must be positive"));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        layernorm_row(out.row_mut(r), gamma, beta, eps);
    }
    flops::add(flops::LAYERNORM * (x.rows() * x.cols()) as u64);
    Ok(out)
}

/// Depthwise convolution over rows without padding: output row `t` mixes
/// input rows `t..t+k` per channel. Output has `x.rows() - k + 1` rows.
pub fn depthwise_conv_valid<T: Real>(
    x: &Matrix<T>,
    weights: &Matrix<T>,
    bias: &[T],
) -> Result<Matrix<T>> {
    let (k, d) = weights.shape();
    if k == 0 || d != x.cols() || bias.len() != d {
        return Err(Error::shape("depthwise_conv", x.shape(), weights.shape()));
    }
    let t_out = (x.rows() + 1).saturating_sub(k);
    let mut out = Matrix::zeros(t_out, d);
    for t in 0..t_out {
        let orow = out.row_mut(t);
        for j in 0..k {
            let wrow = weights.row(j);
            let xrow = x.row(t + j);
            for c in 0..d {
                orow[c] += wrow[c] * xrow[c];
            }
        }
        for (o, &b) in orow.iter_mut().zip(bias) {
            *o += b;
        }
    }
    flops::add(((2 * k + 1) * d * t_out) as u64);
    Ok(out)
}

/// Depthwise convolution with `left` zero frames before and `right` after
/// the input, so the output keeps the input length when
/// `left + right = k - 1`.
pub fn depthwise_conv_padded<T: Real>(
    x: &Matrix<T>,
    weights: &Matrix<T>,
    bias: &[T],
    left: usize,
    right: usize,
) -> Result<Matrix<T>> {
    if weights.cols() != x.cols() {
        return Err(Error::shape("depthwise_conv", x.shape(), weights.shape()));
    }
    let mut padded = Matrix::zeros(left, x.cols());
    padded.append_rows(x)?;
    padded.append_rows(&Matrix::zeros(right, x.cols()))?;
    depthwise_conv_valid(&padded, weights, bias)
}

/// Causal depthwise convolution: the input is left-padded with `k - 1`
/// zero frames so output row `t` sees input rows `t-k+1..=t` only.
pub fn depthwise_causal_conv<T: Real>(
    x: &Matrix<T>,
    weights: &Matrix<T>,
    bias: &[T],
) -> Result<Matrix<T>> {
    if weights.rows() == 0 {
        return Err(Error::shape(
            "depthwise_causal_conv",
            x.shape(),
            weights.shape(),
        ));
    }
    depthwise_conv_padded(x, weights, bias, weights.rows() - 1, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Relu,
    /// First half of the input gated by the sigmoid of the second half.
    GluGate,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swish" => Ok(Activation::Swish),
            "relu" => Ok(Activation::Relu),
            "glu-gate" | "glu" => Ok(Activation::GluGate),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::UnknownKind {
                what: "activation",
                name: other.to_string(),
            }),
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[inline]
pub fn swish<T: Real>(z: T) -> T {
    z * sigmoid(z)
}

/// Elementwise activation. `GluGate` halves the length and requires an even
/// input length.
pub fn activation<T: Real>(x: &[T], kind: Activation) -> Result<Vec<T>> {
    let out: Vec<T> = match kind {
        Activation::Swish => x.iter().map(|&z| swish(z)).collect(),
        Activation::Relu => x.iter().map(|&z| z.max(T::zero())).collect(),
        Activation::Sigmoid => x.iter().map(|&z| sigmoid(z)).collect(),
        Activation::GluGate => {
            if !x.len().is_multiple_of(2) {
                return Err(Error::shape("glu", x.len(), 2));
            }
            let (a, g) = x.split_at(x.len() / 2);
            a.iter().zip(g).map(|(&a, &g)| a * sigmoid(g)).collect()
        }
    };
    let per = match kind {
        Activation::Swish => flops::SWISH,
        Activation::Relu => flops::RELU,
        Activation::Sigmoid => flops::SIGMOID,
        Activation::GluGate => flops::GLU,
    };
    flops::add(per * out.len() as u64);
    Ok(out)
}

/// Row-wise [`activation`]; `GluGate` halves the column count.
pub fn activation_rows<T: Real>(x: &Matrix<T>, kind: Activation) -> Result<Matrix<T>> {
    let cols = if kind == Activation::GluGate {
        x.cols() / 2
    } else {
        x.cols()
    };
    let mut out = Matrix::zeros(x.rows(), cols);
    for r in 0..x.rows() {
        let y = activation(x.row(r), kind)?;
        out.row_mut(r).copy_from_slice(&y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    fn triple_loop(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a[(i, p)] * b[(p, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_projector() {
        let i2 = Matrix::<f64>::identity(2);
        let m = Matrix::from_f64_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);

        let p = Matrix::<f64>::from_f64_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        let v = Matrix::from_f64_rows(&[&[5.0], &[7.0]]).unwrap();
        let expected = Matrix::from_f64_rows(&[&[5.0], &[0.0]]).unwrap();
        assert_eq!(matmul(&p, &v).unwrap(), expected);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = rng.normal_matrix::<f64>(7, 5, 1.0);
        let b = rng.normal_matrix::<f64>(5, 3, 1.0);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_rel_diff(&triple_loop(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::<f64>::zeros(2, 3);
        let err = matmul(&a, &a).unwrap_err();
        assert!(err.to_string().contains("[2x3] vs [2x3]"), "{err}");
    }

    #[test]
    fn matmul_bt_agrees_with_transpose() {
        let mut rng = Rng::new(3);
        let a = rng.normal_matrix::<f64>(4, 6, 1.0);
        let b = rng.normal_matrix::<f64>(5, 6, 1.0);
        let want = matmul(&a, &b.transpose()).unwrap();
        assert!(matmul_bt(&a, &b).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::<f64>::zeros(1, 2));
        assert_eq!(s.as_slice(), &[0.5, 0.5]);

        let s = softmax_rows(&Matrix::<f64>::from_f64_rows(&[&[1000.0, 0.0]]).unwrap());
        assert!(s.all_finite());
        assert_eq!(s[(0, 0)], 1.0);
        assert!(s[(0, 1)] < 1e-300);
    }

    #[test]
    fn softmax_matches_extended_precision() {
        // Oracle: exp/sum in f64 with terms accumulated largest-first after
        // shifting, compared against the f32-free f64 path.
        let mut rng = Rng::new(11);
        let m = rng.normal_matrix::<f64>(1, 9, 3.0);
        let got = softmax_rows(&m);
        let row = m.row(0);
        let mut exps: Vec<f64> = row.iter().map(|&z| z.exp()).collect();
        let mut sorted = exps.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let total: f64 = sorted.iter().sum();
        for e in exps.iter_mut() {
            *e /= total;
        }
        for (g, w) in got.row(0).iter().zip(&exps) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1e-300), "{g} vs {w}");
        }
    }

    #[test]
    fn layernorm_examples() {
        let ones = [1.0, 1.0];
        let zeros = [0.0, 0.0];
        let c = Matrix::<f64>::filled(1, 2, 4.0);
        let out = layernorm(&c, &ones, &zeros, 1e-6).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);

        let r = Matrix::<f64>::from_f64_rows(&[&[1.0, 3.0]]).unwrap();
        let out = layernorm(&r, &ones, &zeros, 1e-9).unwrap();
        assert!((out[(0, 0)] + 1.0).abs() < 1e-6);
        assert!((out[(0, 1)] - 1.0).abs() < 1e-6);

        let mut rng = Rng::new(5);
        let x = rng.normal_matrix::<f64>(3, 17, 4.0);
        let g = vec![1.0; 17];
        let b = vec![0.0; 17];
        let y = layernorm(&x, &g, &b, 1e-12).unwrap();
        for row in y.iter_rows() {
            let mean: f64 = row.iter().sum::<f64>() / 17.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }

        assert!(layernorm(&x, &g[..3], &b, 1e-6).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = Rng::new(1);
        let x = rng.normal_matrix::<f64>(6, 3, 1.0);
        let w = Matrix::<f64>::filled(1, 3, 1.0);
        let y = depthwise_causal_conv(&x, &w, &[0.0; 3]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_impulse_response_is_causal() {
        let mut x = Matrix::<f64>::zeros(6, 2);
        x[(0, 0)] = 1.0;
        x[(0, 1)] = 1.0;
        let w = Matrix::from_f64_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let y = depthwise_causal_conv(&x, &w, &[0.0; 2]).unwrap();
        for t in 0..6 {
            let nonzero = y.row(t).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, t < 3, "t={t}");
        }
        // Newest frame uses the last kernel row.
        assert_eq!(y.row(0), &[5.0, 6.0]);
        assert_eq!(y.row(2), &[1.0, 2.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Matrix::<f64>::zeros(4, 3);
        let w = Matrix::<f64>::zeros(2, 4);
        assert!(depthwise_causal_conv(&x, &w, &[0.0; 4]).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(
            activation(&[-2.0, 3.0], Activation::Relu).unwrap(),
            vec![0.0, 3.0]
        );
        assert_eq!(activation(&[0.0], Activation::Swish).unwrap(), vec![0.0]);
        assert_eq!(
            activation(&[0.0_f64], Activation::Sigmoid).unwrap(),
            vec![0.5]
        );
        assert_eq!(
            activation(&[2.0_f64, 0.0], Activation::GluGate).unwrap(),
            vec![1.0]
        );
        assert!("tanh".parse::<Activation>().is_err());
        assert_eq!(
            "glu-gate".parse::<Activation>().unwrap(),
            Activation::GluGate
        );
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
            let mut rng = Rng::new(seed);
            let a = rng.normal_matrix::<f64>(m, k, 1.0);
            let b = rng.normal_matrix::<f64>(k, n, 1.0);
            let c = rng.normal_matrix::<f64>(n, p, 1.0);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_rel_diff(&right) < 1e-9);
        }

        #[test]
        fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..12, scale in 0.1f64..50.0) {
            let mut rng = Rng::new(seed);
            let m = rng.normal_matrix::<f64>(rows, cols, scale);
            let s = softmax_rows(&m);
            for row in s.iter_rows() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn causal_conv_ignores_future(seed in any::<u64>(), t_len in 2usize..20, k in 1usize..6, cut in 0usize..19) {
            let cut = cut % (t_len - 1);
            let mut rng = Rng::new(seed);
            let x = rng.normal_matrix::<f64>(t_len, 3, 1.0);
            let w = rng.normal_matrix::<f64>(k, 3, 1.0);
            let b = rng.normal_vec::<f64>(3, 1.0);
            let y = depthwise_causal_conv(&x, &w, &b).unwrap();
            let mut z = x.clone();
            for t in cut + 1..t_len {
                z.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
            }
            let y2 = depthwise_causal_conv(&z, &w, &b).unwrap();
            prop_assert!(y.slice_rows(0..cut + 1).bit_eq(&y2.slice_rows(0..cut + 1)));
        }

        #[test]
        fn ops_are_deterministic(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = rng.normal_matrix::<f64>(4, 4, 1.0);
            prop_assert!(matmul(&a, &a).unwrap().bit_eq(&matmul(&a, &a).unwrap()));
            prop_assert!(softmax_rows(&a).bit_eq(&softmax_rows(&a)));
        }
    }
}
