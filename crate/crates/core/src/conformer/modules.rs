use super::weights::{
    AttentionModuleWeights, BlockWeights, ConvWeights, EncoderWeights, FeedForwardWeights,
    NormWeights,
};
use crate::attention::{explicit_windowed_attention, performer_attention};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{
    activation_rows, depthwise_conv_padded, layernorm, linear, residual_add, Activation, Matrix,
    Real,
};

/// Context a block sees around each frame. The first-pass encoder uses
/// left-only windows; the second pass widens them to the right.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockGeometry {
    pub conv_left: usize,
    pub conv_right: usize,
    pub attn_left: usize,
    pub attn_right: usize,
    /// Causal prefix sums for linear attention, otherwise the global form.
    pub causal: bool,
    pub layernorm_eps: f64,
    pub kernel_eps: f64,
}

impl BlockGeometry {
    pub fn encoder(cfg: &EncoderConfig) -> Self {
        Self {
            conv_left: cfg.conv_kernel - 1,
            conv_right: 0,
            attn_left: cfg.attn_left_context,
            attn_right: 0,
            causal: true,
            layernorm_eps: cfg.layernorm_eps,
            kernel_eps: cfg.kernel.eps,
        }
    }
}

pub(crate) fn norm<T: Real>(x: &Matrix<T>, w: &NormWeights<T>, eps: f64) -> Result<Matrix<T>> {
    layernorm(x, &w.gamma, &w.beta, T::of(eps))
}

/// Half-step feed-forward: `x + ½·(swish(LN(x) W₁ + b₁) W₂ + b₂)`.
pub fn ff_module<T: Real>(x: &Matrix<T>, w: &FeedForwardWeights<T>, eps: f64) -> Result<Matrix<T>> {
    let h = linear(&norm(x, &w.norm, eps)?, &w.w_in, Some(&w.b_in))?;
    let h = activation_rows(&h, Activation::Swish)?;
    let y = linear(&h, &w.w_out, Some(&w.b_out))?;
    let mut out = x.clone();
    residual_add(&mut out, &y, T::of(0.5))?;
    Ok(out)
}

/// Norm, pointwise expansion and GLU: everything before the depthwise
/// convolution. Rowwise, so it can run one chunk at a time.
pub(crate) fn conv_gate<T: Real>(x: &Matrix<T>, w: &ConvWeights<T>, eps: f64) -> Result<Matrix<T>> {
    let h = linear(
        &norm(x, &w.norm, eps)?,
        &w.pointwise_in,
        Some(&w.b_pointwise_in),
    )?;
    activation_rows(&h, Activation::GluGate)
}

/// Everything after the depthwise convolution, including the residual.
pub(crate) fn conv_finish<T: Real>(
    x: &Matrix<T>,
    conv: &Matrix<T>,
    w: &ConvWeights<T>,
    eps: f64,
) -> Result<Matrix<T>> {
    let h = activation_rows(&norm(conv, &w.mid_norm, eps)?, Activation::Swish)?;
    let y = linear(&h, &w.pointwise_out, Some(&w.b_pointwise_out))?;
    let mut out = x.clone();
    residual_add(&mut out, &y, T::one())?;
    Ok(out)
}

/// Convolution module with `left` and `right` zero frames of padding
/// around the depthwise convolution (`left + right = k - 1`).
pub fn conv_module<T: Real>(
    x: &Matrix<T>,
    w: &ConvWeights<T>,
    eps: f64,
    left: usize,
    right: usize,
) -> Result<Matrix<T>> {
    if left + right + 1 != w.depthwise.rows() {
        return Err(Error::config(format!(
            "conv padding {left}+{right} does not fit kernel {}",
            w.depthwise.rows()
        )));
    }
    let g = conv_gate(x, w, eps)?;
    let c = depthwise_conv_padded(&g, &w.depthwise, &w.b_depthwise, left, right)?;
    conv_finish(x, &c, w, eps)
}

/// Pre-norm self-attention with a full residual.
pub fn attention_module<T: Real>(
    x: &Matrix<T>,
    w: &AttentionModuleWeights<T>,
    geom: &BlockGeometry,
) -> Result<Matrix<T>> {
    let h = norm(x, &w.norm, geom.layernorm_eps)?;
    let y = match &w.kernel {
        None => explicit_windowed_attention(&h, &w.params, geom.attn_left, geom.attn_right)?,
        Some(spec) => {
            performer_attention(&h, &w.params, spec, geom.causal, T::of(geom.kernel_eps))?
        }
    };
    let mut out = x.clone();
    residual_add(&mut out, &y, T::one())?;
    Ok(out)
}

/// One block under the given geometry: FF, conv, attention (if present),
/// FF, final norm.
pub fn block_forward<T: Real>(
    x: &Matrix<T>,
    w: &BlockWeights<T>,
    geom: &BlockGeometry,
) -> Result<Matrix<T>> {
    let eps = geom.layernorm_eps;
    let h = ff_module(x, &w.ff1, eps)?;
    let h = conv_module(&h, &w.conv, eps, geom.conv_left, geom.conv_right)?;
    let h = match &w.attn {
        Some(a) => attention_module(&h, a, geom)?,
        None => h,
    };
    let h = ff_module(&h, &w.ff2, eps)?;
    norm(&h, &w.final_norm, eps)
}

/// Causal conformer block with self-attention.
pub fn conformer_block<T: Real>(
    x: &Matrix<T>,
    w: &BlockWeights<T>,
    cfg: &EncoderConfig,
) -> Result<Matrix<T>> {
    if w.attn.is_none() {
        return Err(Error::config("conformer_block needs attention weights"));
    }
    block_forward(x, w, &BlockGeometry::encoder(cfg))
}

/// Causal block without self-attention.
pub fn conv_only_block<T: Real>(
    x: &Matrix<T>,
    w: &BlockWeights<T>,
    cfg: &EncoderConfig,
) -> Result<Matrix<T>> {
    if w.attn.is_some() {
        return Err(Error::config("conv_only_block got attention weights"));
    }
    block_forward(x, w, &BlockGeometry::encoder(cfg))
}

/// Linear projection of input features to the model width.
pub fn frontend<T: Real>(features: &Matrix<T>, weights: &EncoderWeights<T>) -> Result<Matrix<T>> {
    if features.cols() != weights.frontend.rows() {
        return Err(Error::shape(
            "frontend",
            features.shape(),
            weights.frontend.shape(),
        ));
    }
    linear(features, &weights.frontend, Some(&weights.frontend_bias))
}

/// Full-utterance causal encoder: `T × input_dim` features to `T × d`.
pub fn encoder_forward<T: Real>(
    features: &Matrix<T>,
    weights: &EncoderWeights<T>,
    cfg: &EncoderConfig,
) -> Result<Matrix<T>> {
    cfg.validate()?;
    weights.check_matches(cfg)?;
    let geom = BlockGeometry::encoder(cfg);
    let mut h = frontend(features, weights)?;
    for block in &weights.blocks {
        h = block_forward(&h, block, &geom)?;
    }
    Ok(h)
}
