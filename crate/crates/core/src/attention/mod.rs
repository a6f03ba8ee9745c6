//! Attention layers: explicit local softmax attention (with a bounded
//! key/value cache for streaming) and kernelized linear attention (with a
//! fixed-size prefix-sum state for streaming).

mod explicit;
mod kernel;
mod performer;
pub mod reference;

pub(crate) use explicit::logit_scale;
pub use explicit::{explicit_local_causal_attention, explicit_windowed_attention, LocalKVCache};
pub use kernel::{feature_map, FeatureAffine, KernelKind, KernelSpec};
pub use performer::{
    clamp_denominator, fault, performer_attention, performer_bidirectional, performer_causal,
    performer_causal_step, PrefixSumState, DEFAULT_EPS,
};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// Projection weights of one multi-head attention layer.
///
/// `relpos_bias` holds one row per head with one learned logit offset per
/// relative position in the attention window; it is `heads × 0` for
/// linear attention, which cannot carry pairwise biases.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub heads: usize,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub relpos_bias: Matrix<T>,
}

impl<T: Real> AttentionParams<T> {
    /// Identity projections and zero bias over `window` offsets.
    pub fn identity(d: usize, heads: usize, window: usize) -> Self {
        Self {
            heads,
            wq: Matrix::identity(d),
            wk: Matrix::identity(d),
            wv: Matrix::identity(d),
            wo: Matrix::identity(d),
            relpos_bias: Matrix::zeros(heads, window),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model_dim {d} is not divisible by {} heads",
                self.heads
            )));
        }
        for (name, m) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ] {
            if m.shape() != (d, d) {
                return Err(Error::shape(name, m.shape(), (d, d)));
            }
        }
        if self.relpos_bias.rows() != self.heads {
            return Err(Error::shape(
                "relpos_bias",
                self.relpos_bias.shape(),
                self.heads,
            ));
        }
        Ok(())
    }
}
