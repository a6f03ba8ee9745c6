//! Cascaded encoder: a non-causal second pass that reads only the
//! first-pass outputs and sees a bounded number of future frames.

use crate::config::{AttentionKind, CascadeConfig, EncoderConfig};
use crate::conformer::{
    block_forward, encoder_forward, join, uniform, AttentionShape, BlockGeometry, BlockShape,
    BlockWeights, EncoderWeights, Tensors,
};
use crate::error::{Error, Result};
use crate::numerics::{linear, Matrix, Real, Rng};

/// Second-pass weights. `projection` maps the first-pass width to the
/// second-pass width and is present only when they differ.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeWeights<T> {
    pub projection: Option<Matrix<T>>,
    pub projection_bias: Option<Vec<T>>,
    pub blocks: Vec<BlockWeights<T>>,
}

impl<T: Real> Tensors<T> for CascadeWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        if let (Some(p), Some(b)) = (&self.projection, &self.projection_bias) {
            p.visit(&join(prefix, "projection"), f);
            b.visit(&join(prefix, "projection_bias"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        if let (Some(p), Some(b)) = (&mut self.projection, &mut self.projection_bias) {
            p.visit_mut(&join(prefix, "projection"), f);
            b.visit_mut(&join(prefix, "projection_bias"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// Shape of second-pass block `index`.
pub fn cascade_block_shape(ccfg: &CascadeConfig, index: usize) -> BlockShape {
    let performer = ccfg.attention_kind == AttentionKind::Performer;
    BlockShape {
        model_dim: ccfg.model_dim,
        ff_expansion: ccfg.ff_expansion,
        conv_kernel: ccfg.conv_kernel,
        attention: Some(AttentionShape {
            kind: ccfg.attention_kind,
            heads: ccfg.heads,
            window: if performer {
                0
            } else {
                ccfg.left_context + ccfg.block_lookahead(index) + 1
            },
            affine_features: (performer && ccfg.kernel.use_affine)
                .then(|| ccfg.kernel.feature_dim(ccfg.head_dim())),
        }),
    }
}

/// Context seen by second-pass block `index`. Linear attention is global
/// unless the right context is zero, in which case it stays causal.
pub fn cascade_geometry(ccfg: &CascadeConfig, index: usize) -> BlockGeometry {
    let right = ccfg.conv_lookahead();
    BlockGeometry {
        conv_left: ccfg.conv_kernel - 1 - right,
        conv_right: right,
        attn_left: ccfg.left_context,
        attn_right: ccfg.block_lookahead(index),
        causal: ccfg.right_context == 0,
        layernorm_eps: ccfg.layernorm_eps,
        kernel_eps: ccfg.kernel.eps,
    }
}

impl<T: Real> CascadeWeights<T> {
    fn build(ccfg: &CascadeConfig, mut rng: Option<&mut Rng>) -> Result<Self> {
        ccfg.validate()?;
        let (projection, projection_bias) = if ccfg.model_dim != ccfg.input_dim {
            let p = match rng.as_deref_mut() {
                Some(r) => uniform(r, ccfg.input_dim, ccfg.model_dim, ccfg.input_dim),
                None => Matrix::zeros(ccfg.input_dim, ccfg.model_dim),
            };
            (Some(p), Some(vec![T::zero(); ccfg.model_dim]))
        } else {
            (None, None)
        };
        let blocks = (0..ccfg.blocks)
            .map(|i| {
                BlockWeights::new(
                    cascade_block_shape(ccfg, i),
                    ccfg.kernel.kind,
                    rng.as_deref_mut(),
                )
            })
            .collect();
        Ok(Self {
            projection,
            projection_bias,
            blocks,
        })
    }

    pub fn zeros(ccfg: &CascadeConfig) -> Result<Self> {
        Self::build(ccfg, None)
    }

    pub fn check_matches(&self, ccfg: &CascadeConfig) -> Result<()> {
        let want_proj = ccfg.model_dim != ccfg.input_dim;
        let proj_ok = match &self.projection {
            Some(p) => want_proj && p.shape() == (ccfg.input_dim, ccfg.model_dim),
            None => !want_proj,
        };
        if !proj_ok || self.projection.is_some() != self.projection_bias.is_some() {
            return Err(Error::config(
                "second-pass projection does not match config",
            ));
        }
        if self.blocks.len() != ccfg.blocks {
            return Err(Error::config(format!(
                "second pass has {} blocks, config wants {}",
                self.blocks.len(),
                ccfg.blocks
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.shape() != cascade_block_shape(ccfg, i) {
                return Err(Error::config(format!(
                    "second-pass block {i} does not match config"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic second-pass weights, initialized like the first pass.
pub fn init_cascade_weights<T: Real>(
    ccfg: &CascadeConfig,
    rng: &mut Rng,
) -> Result<CascadeWeights<T>> {
    CascadeWeights::build(ccfg, Some(rng))
}

/// Runs the second pass over first-pass outputs (`T × input_dim`).
pub fn second_pass_forward<T: Real>(
    first: &Matrix<T>,
    weights: &CascadeWeights<T>,
    ccfg: &CascadeConfig,
) -> Result<Matrix<T>> {
    ccfg.validate()?;
    weights.check_matches(ccfg)?;
    if first.cols() != ccfg.input_dim {
        return Err(Error::shape(
            "second_pass",
            first.shape(),
            (first.rows(), ccfg.input_dim),
        ));
    }
    let mut h = match (&weights.projection, &weights.projection_bias) {
        (Some(p), Some(b)) => linear(first, p, Some(b))?,
        _ => first.clone(),
    };
    for (i, block) in weights.blocks.iter().enumerate() {
        h = block_forward(&h, block, &cascade_geometry(ccfg, i))?;
    }
    Ok(h)
}

/// First- and second-pass outputs of a cascaded encoder.
#[derive(Clone, Debug)]
pub struct CascadeOutput<T> {
    pub first: Matrix<T>,
    pub second: Matrix<T>,
}

/// Runs the causal encoder, then the second pass on its output. The
/// first-pass result is returned untouched.
pub fn cascade_forward<T: Real>(
    features: &Matrix<T>,
    enc_weights: &EncoderWeights<T>,
    enc_cfg: &EncoderConfig,
    cas_weights: &CascadeWeights<T>,
    cas_cfg: &CascadeConfig,
) -> Result<CascadeOutput<T>> {
    if cas_cfg.input_dim != enc_cfg.model_dim {
        return Err(Error::config(format!(
            "second pass expects width {}, first pass emits {}",
            cas_cfg.input_dim, enc_cfg.model_dim
        )));
    }
    let first = encoder_forward(features, enc_weights, enc_cfg)?;
    let second = second_pass_forward(&first, cas_weights, cas_cfg)?;
    Ok(CascadeOutput { first, second })
}
