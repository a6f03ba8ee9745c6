//! Chunked streaming inference with per-block caches.
//!
//! Feeding a sequence through [`StreamState::step`] in chunks of any size
//! reproduces [`encoder_forward`](crate::conformer::encoder_forward) on the
//! whole sequence. The per-row arithmetic is shared with the batch path, so
//! the match is exact in practice.

use crate::attention::{feature_map, logit_scale, LocalKVCache, PrefixSumState};
use crate::config::{AttentionKind, EncoderConfig};
use crate::conformer::{
    conv_finish, conv_gate, ff_module, frontend, norm, AttentionModuleWeights, EncoderWeights,
};
use crate::error::{Error, Result};
use crate::numerics::{depthwise_conv_valid, matmul, residual_add, Matrix, Real};

#[derive(Clone, Debug)]
enum AttentionState<T> {
    None,
    Explicit(Vec<LocalKVCache<T>>),
    Performer(Vec<PrefixSumState<T>>),
}

#[derive(Clone, Debug)]
struct BlockState<T> {
    /// Last `k - 1` rows fed to the depthwise convolution, oldest first.
    conv_history: Matrix<T>,
    attn: AttentionState<T>,
}

/// Cached scalars of a stream. The `scalars_*` fields count one `d`-vector
/// per cached attention frame per block (keys and values together, as
/// tallied for state-count comparisons); the `physical_*` fields count every
/// stored scalar: keys and values separately plus convolution history.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StateCensus {
    pub scalars_held: usize,
    pub scalars_capacity: usize,
    pub physical_held: usize,
    pub physical_capacity: usize,
}

/// Everything a stream must remember between chunks.
#[derive(Clone, Debug)]
pub struct StreamState<T> {
    blocks: Vec<BlockState<T>>,
    frames_emitted: usize,
    digest: u64,
    capacity: StateCensus,
}

/// Empty caches for `cfg`.
pub fn init_state<T: Real>(cfg: &EncoderConfig) -> Result<StreamState<T>> {
    StreamState::new(cfg)
}

/// Free-function form of [`StreamState::step`].
pub fn step<T: Real>(
    state: &mut StreamState<T>,
    chunk: &Matrix<T>,
    weights: &EncoderWeights<T>,
    cfg: &EncoderConfig,
) -> Result<Matrix<T>> {
    state.step(chunk, weights, cfg)
}

/// Steady-state cache size of `cfg`, independent of stream length.
pub fn state_capacity(cfg: &EncoderConfig) -> StateCensus {
    let d = cfg.model_dim;
    let attn_blocks = cfg.attention_blocks();
    let conv = cfg.total_blocks * (cfg.conv_kernel - 1) * d;
    match cfg.attention_kind {
        AttentionKind::Explicit => {
            let per_tensor = attn_blocks * cfg.attn_left_context * d;
            StateCensus {
                scalars_held: 0,
                scalars_capacity: per_tensor,
                physical_held: 0,
                physical_capacity: 2 * per_tensor + conv,
            }
        }
        AttentionKind::Performer => {
            let prefix = attn_blocks * cfg.heads * cfg.feature_dim() * (cfg.head_dim() + 1);
            StateCensus {
                scalars_held: 0,
                scalars_capacity: prefix,
                physical_held: 0,
                physical_capacity: prefix + conv,
            }
        }
    }
}

impl<T: Real> StreamState<T> {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let hd = cfg.head_dim();
        let blocks = (0..cfg.total_blocks)
            .map(|i| {
                let attn = if cfg.is_conv_only(i) {
                    AttentionState::None
                } else {
                    match cfg.attention_kind {
                        AttentionKind::Explicit => AttentionState::Explicit(
                            (0..cfg.heads)
                                .map(|_| LocalKVCache::new(cfg.attn_left_context))
                                .collect(),
                        ),
                        AttentionKind::Performer => AttentionState::Performer(
                            (0..cfg.heads)
                                .map(|_| PrefixSumState::new(cfg.feature_dim(), hd))
                                .collect(),
                        ),
                    }
                };
                BlockState {
                    conv_history: Matrix::zeros(0, cfg.model_dim),
                    attn,
                }
            })
            .collect();
        Ok(Self {
            blocks,
            frames_emitted: 0,
            digest: cfg.digest(),
            capacity: state_capacity(cfg),
        })
    }

    pub fn frames_emitted(&self) -> usize {
        self.frames_emitted
    }

    /// Scalars currently cached, and the steady-state maximum.
    pub fn census(&self) -> StateCensus {
        let mut out = self.capacity;
        out.scalars_held = 0;
        out.physical_held = 0;
        for b in &self.blocks {
            out.physical_held += b.conv_history.rows() * b.conv_history.cols();
            match &b.attn {
                AttentionState::None => {}
                AttentionState::Explicit(caches) => {
                    let d = b.conv_history.cols();
                    let frames = caches.first().map_or(0, LocalKVCache::len);
                    out.scalars_held += frames * d;
                    out.physical_held += 2 * frames * d;
                }
                AttentionState::Performer(states) => {
                    if states.iter().any(|s| s.frames_seen() > 0) {
                        let n: usize = states.iter().map(PrefixSumState::len).sum();
                        out.scalars_held += n;
                        out.physical_held += n;
                    }
                }
            }
        }
        out
    }

    /// Encodes the next `c` frames and returns their `c × d` outputs.
    pub fn step(
        &mut self,
        chunk: &Matrix<T>,
        weights: &EncoderWeights<T>,
        cfg: &EncoderConfig,
    ) -> Result<Matrix<T>> {
        if cfg.digest() != self.digest {
            return Err(Error::config(
                "stream state was created for a different config",
            ));
        }
        if chunk.cols() != cfg.input_dim {
            return Err(Error::shape(
                "stream_step",
                chunk.shape(),
                (chunk.rows(), cfg.input_dim),
            ));
        }
        weights.check_matches(cfg)?;
        if chunk.rows() == 0 {
            return Ok(Matrix::zeros(0, cfg.model_dim));
        }
        let eps = cfg.layernorm_eps;
        let mut h = frontend(chunk, weights)?;
        for (state, w) in self.blocks.iter_mut().zip(&weights.blocks) {
            h = ff_module(&h, &w.ff1, eps)?;
            h = stream_conv(&h, state, &w.conv, eps)?;
            if let Some(a) = &w.attn {
                h = stream_attention(&h, &mut state.attn, a, cfg)?;
            }
            h = ff_module(&h, &w.ff2, eps)?;
            h = norm(&h, &w.final_norm, eps)?;
        }
        self.frames_emitted += chunk.rows();
        Ok(h)
    }
}

fn stream_conv<T: Real>(
    x: &Matrix<T>,
    state: &mut BlockState<T>,
    w: &crate::conformer::ConvWeights<T>,
    eps: f64,
) -> Result<Matrix<T>> {
    let k = w.depthwise.rows();
    let g = conv_gate(x, w, eps)?;
    let hist = &state.conv_history;
    let mut window = Matrix::zeros(k - 1 - hist.rows(), g.cols());
    window.append_rows(hist)?;
    window.append_rows(&g)?;
    let c = depthwise_conv_valid(&window, &w.depthwise, &w.b_depthwise)?;
    let keep = (hist.rows() + g.rows()).min(k - 1);
    let mut tail = hist.clone();
    tail.append_rows(&g)?;
    state.conv_history = tail.slice_rows(tail.rows() - keep..tail.rows());
    conv_finish(x, &c, w, eps)
}

fn stream_attention<T: Real>(
    x: &Matrix<T>,
    state: &mut AttentionState<T>,
    w: &AttentionModuleWeights<T>,
    cfg: &EncoderConfig,
) -> Result<Matrix<T>> {
    let p = &w.params;
    let hd = p.head_dim();
    let h = norm(x, &w.norm, cfg.layernorm_eps)?;
    let q = matmul(&h, &p.wq)?;
    let k = matmul(&h, &p.wk)?;
    let v = matmul(&h, &p.wv)?;
    let mut ctx = Matrix::zeros(x.rows(), p.model_dim());
    match (state, &w.kernel) {
        (AttentionState::Explicit(caches), None) => {
            let scale = logit_scale::<T>(hd);
            let mut scratch = Vec::new();
            for t in 0..x.rows() {
                for (hi, cache) in caches.iter_mut().enumerate() {
                    let cols = hi * hd..(hi + 1) * hd;
                    cache.attend_and_push(
                        &q.row(t)[cols.clone()],
                        &k.row(t)[cols.clone()],
                        &v.row(t)[cols.clone()],
                        p.relpos_bias.row(hi),
                        scale,
                        &mut scratch,
                        &mut ctx.row_mut(t)[cols],
                    );
                }
            }
        }
        (AttentionState::Performer(states), Some(spec)) => {
            let eps = T::of(cfg.kernel.eps);
            for t in 0..x.rows() {
                for (hi, st) in states.iter_mut().enumerate() {
                    let cols = hi * hd..(hi + 1) * hd;
                    let qf = feature_map(
                        &Matrix::from_vec(1, hd, q.row(t)[cols.clone()].to_vec())?,
                        spec,
                    )?;
                    let kf = feature_map(
                        &Matrix::from_vec(1, hd, k.row(t)[cols.clone()].to_vec())?,
                        spec,
                    )?;
                    let out = crate::attention::performer_causal_step(
                        st,
                        qf.as_slice(),
                        kf.as_slice(),
                        &v.row(t)[cols.clone()],
                        eps,
                    )?;
                    ctx.row_mut(t)[cols].copy_from_slice(&out);
                }
            }
        }
        _ => return Err(Error::config("attention weights do not match stream state")),
    }
    let y = matmul(&ctx, &p.wo)?;
    let mut out = x.clone();
    residual_add(&mut out, &y, T::one())?;
    Ok(out)
}
