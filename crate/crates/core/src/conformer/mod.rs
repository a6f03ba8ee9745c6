//! Conformer blocks, conv-only blocks and the causal encoder stack.
//!
//! Each block runs a half-step feed-forward module, a convolution module,
//! self-attention (absent in conv-only blocks), a second half-step
//! feed-forward module and a final layer norm. Every module is pre-norm.

mod modules;
mod weights;

pub use modules::{
    attention_module, block_forward, conformer_block, conv_module, conv_only_block,
    encoder_forward, ff_module, frontend, BlockGeometry,
};
pub(crate) use modules::{conv_finish, conv_gate, norm};
pub use weights::{
    init_weights, randomize_all, AttentionModuleWeights, AttentionShape, BlockShape, BlockWeights,
    ConvWeights, EncoderWeights, FeedForwardWeights, NormWeights, Tensors,
};
pub(crate) use weights::{join, uniform};
