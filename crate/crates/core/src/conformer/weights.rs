//! Weight containers for conformer blocks and the full encoder, with
//! deterministic initialization and a named-tensor visitor used for
//! parameter census and serialization.

use crate::attention::{AttentionParams, FeatureAffine, KernelKind, KernelSpec};
use crate::config::{AttentionKind, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, Rng};

/// Walks every named tensor of a weight structure in a fixed order.
pub trait Tensors<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T]));

    /// Total number of scalars held.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, data| n += data.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real> Tensors<T> for Matrix<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(prefix, &[self.rows(), self.cols()], self.as_slice());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let dims = [self.rows(), self.cols()];
        f(prefix, &dims, self.as_mut_slice());
    }
}

impl<T: Real> Tensors<T> for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(prefix, &[self.len()], self);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let dims = [self.len()];
        f(prefix, &dims, self);
    }
}

macro_rules! impl_tensors {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: Real> Tensors<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
                $( self.$field.visit(&join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
                $( self.$field.visit_mut(&join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> NormWeights<T> {
    pub fn unit(d: usize) -> Self {
        Self {
            gamma: vec![T::one(); d],
            beta: vec![T::zero(); d],
        }
    }
}

impl_tensors!(NormWeights { gamma, beta });

/// Pre-norm feed-forward module: `d → FFM·d → d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardWeights<T> {
    pub norm: NormWeights<T>,
    pub w_in: Matrix<T>,
    pub b_in: Vec<T>,
    pub w_out: Matrix<T>,
    pub b_out: Vec<T>,
}

impl_tensors!(FeedForwardWeights {
    norm,
    w_in,
    b_in,
    w_out,
    b_out
});

/// Convolution module: pointwise `d → 2d`, GLU, depthwise `k × d`, norm,
/// swish, pointwise `d → d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T> {
    pub norm: NormWeights<T>,
    pub pointwise_in: Matrix<T>,
    pub b_pointwise_in: Vec<T>,
    pub depthwise: Matrix<T>,
    pub b_depthwise: Vec<T>,
    pub mid_norm: NormWeights<T>,
    pub pointwise_out: Matrix<T>,
    pub b_pointwise_out: Vec<T>,
}

impl_tensors!(ConvWeights {
    norm,
    pointwise_in,
    b_pointwise_in,
    depthwise,
    b_depthwise,
    mid_norm,
    pointwise_out,
    b_pointwise_out,
});

impl_tensors!(AttentionParams {
    wq,
    wk,
    wv,
    wo,
    relpos_bias
});
impl_tensors!(FeatureAffine { w, b });

impl<T: Real> Tensors<T> for KernelSpec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        if let Some(a) = &self.affine {
            a.visit(&join(prefix, "affine"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        if let Some(a) = &mut self.affine {
            a.visit_mut(&join(prefix, "affine"), f);
        }
    }
}

/// Pre-norm self-attention module. `kernel` is present for linear
/// attention and absent for explicit softmax attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionModuleWeights<T> {
    pub norm: NormWeights<T>,
    pub params: AttentionParams<T>,
    pub kernel: Option<KernelSpec<T>>,
}

impl<T: Real> Tensors<T> for AttentionModuleWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.params.visit(&join(prefix, "params"), f);
        if let Some(k) = &self.kernel {
            k.visit(&join(prefix, "kernel"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.params.visit_mut(&join(prefix, "params"), f);
        if let Some(k) = &mut self.kernel {
            k.visit_mut(&join(prefix, "kernel"), f);
        }
    }
}

/// One conformer block. `attn` is `None` for conv-only blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub ff1: FeedForwardWeights<T>,
    pub conv: ConvWeights<T>,
    pub attn: Option<AttentionModuleWeights<T>>,
    pub ff2: FeedForwardWeights<T>,
    pub final_norm: NormWeights<T>,
}

impl<T: Real> Tensors<T> for BlockWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.ff1.visit(&join(prefix, "ff1"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        if let Some(a) = &self.attn {
            a.visit(&join(prefix, "attn"), f);
        }
        self.ff2.visit(&join(prefix, "ff2"), f);
        self.final_norm.visit(&join(prefix, "final_norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.ff1.visit_mut(&join(prefix, "ff1"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        if let Some(a) = &mut self.attn {
            a.visit_mut(&join(prefix, "attn"), f);
        }
        self.ff2.visit_mut(&join(prefix, "ff2"), f);
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
    }
}

/// Attention layout of a block, independent of numeric values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub kind: AttentionKind,
    pub heads: usize,
    /// Relative-position offsets covered by the explicit bias table.
    pub window: usize,
    /// `Some(r′)` when linear attention uses an affine feature map.
    pub affine_features: Option<usize>,
}

/// Shape of one block, enough to allocate or count its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub model_dim: usize,
    pub ff_expansion: usize,
    pub conv_kernel: usize,
    pub attention: Option<AttentionShape>,
}

impl BlockShape {
    /// Shape of block `index` in a first-pass encoder.
    pub fn for_encoder(cfg: &EncoderConfig, index: usize) -> Self {
        let performer = cfg.attention_kind == AttentionKind::Performer;
        let attention = (!cfg.is_conv_only(index)).then(|| AttentionShape {
            kind: cfg.attention_kind,
            heads: cfg.heads,
            window: if performer {
                0
            } else {
                cfg.attn_left_context + 1
            },
            affine_features: (performer && cfg.kernel.use_affine).then(|| cfg.feature_dim()),
        });
        Self {
            model_dim: cfg.model_dim,
            ff_expansion: cfg.ff_expansion,
            conv_kernel: cfg.conv_kernel,
            attention,
        }
    }
}

/// Samples a `rows × cols` matrix uniformly in `±1/sqrt(fan_in)`.
pub(crate) fn uniform<T: Real>(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Matrix<T> {
    let bound = (1.0 / (fan_in.max(1) as f64).sqrt()) as f32;
    let data = (0..rows * cols)
        .map(|_| T::of(rng.uniform_f32(bound) as f64))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

fn ff_weights<T: Real>(d: usize, ffm: usize, rng: Option<&mut Rng>) -> FeedForwardWeights<T> {
    let h = ffm * d;
    let (w_in, w_out) = match rng {
        Some(rng) => (uniform(rng, d, h, d), uniform(rng, h, d, h)),
        None => (Matrix::zeros(d, h), Matrix::zeros(h, d)),
    };
    FeedForwardWeights {
        norm: NormWeights::unit(d),
        w_in,
        b_in: vec![T::zero(); h],
        w_out,
        b_out: vec![T::zero(); d],
    }
}

fn conv_weights<T: Real>(d: usize, k: usize, rng: Option<&mut Rng>) -> ConvWeights<T> {
    let (pin, dw, pout) = match rng {
        Some(rng) => (
            uniform(rng, d, 2 * d, d),
            uniform(rng, k, d, k),
            uniform(rng, d, d, d),
        ),
        None => (
            Matrix::zeros(d, 2 * d),
            Matrix::zeros(k, d),
            Matrix::zeros(d, d),
        ),
    };
    ConvWeights {
        norm: NormWeights::unit(d),
        pointwise_in: pin,
        b_pointwise_in: vec![T::zero(); 2 * d],
        depthwise: dw,
        b_depthwise: vec![T::zero(); d],
        mid_norm: NormWeights::unit(d),
        pointwise_out: pout,
        b_pointwise_out: vec![T::zero(); d],
    }
}

fn attention_weights<T: Real>(
    d: usize,
    shape: AttentionShape,
    kernel: KernelKind,
    mut rng: Option<&mut Rng>,
) -> AttentionModuleWeights<T> {
    let mut proj = || match rng.as_deref_mut() {
        Some(r) => uniform(r, d, d, d),
        None => Matrix::zeros(d, d),
    };
    let (wq, wk, wv, wo) = (proj(), proj(), proj(), proj());
    let hd = d / shape.heads;
    let (relpos_width, kernel) = match shape.kind {
        AttentionKind::Explicit => (shape.window, None),
        AttentionKind::Performer => {
            let affine = shape.affine_features.map(|r| FeatureAffine {
                w: match rng {
                    Some(rng) => uniform(rng, r, hd, hd),
                    None => Matrix::zeros(r, hd),
                },
                b: vec![T::zero(); r],
            });
            (
                0,
                Some(KernelSpec {
                    kind: kernel,
                    affine,
                }),
            )
        }
    };
    AttentionModuleWeights {
        norm: NormWeights::unit(d),
        params: AttentionParams {
            heads: shape.heads,
            wq,
            wk,
            wv,
            wo,
            relpos_bias: Matrix::zeros(shape.heads, relpos_width),
        },
        kernel,
    }
}

impl<T: Real> BlockWeights<T> {
    /// Allocates a block. With `rng` the matrices are drawn uniformly in
    /// `±1/sqrt(fan_in)`; otherwise they are zero. Biases are zero and
    /// norms are unit either way.
    pub fn new(shape: BlockShape, kernel: KernelKind, mut rng: Option<&mut Rng>) -> Self {
        let d = shape.model_dim;
        let ff1 = ff_weights(d, shape.ff_expansion, rng.as_deref_mut());
        let conv = conv_weights(d, shape.conv_kernel, rng.as_deref_mut());
        let attn = shape
            .attention
            .map(|a| attention_weights(d, a, kernel, rng.as_deref_mut()));
        let ff2 = ff_weights(d, shape.ff_expansion, rng);
        Self {
            ff1,
            conv,
            attn,
            ff2,
            final_norm: NormWeights::unit(d),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.final_norm.gamma.len()
    }

    pub fn is_conv_only(&self) -> bool {
        self.attn.is_none()
    }

    pub fn shape(&self) -> BlockShape {
        let d = self.model_dim();
        BlockShape {
            model_dim: d,
            ff_expansion: self.ff1.w_in.cols() / d.max(1),
            conv_kernel: self.conv.depthwise.rows(),
            attention: self.attn.as_ref().map(|a| AttentionShape {
                kind: if a.kernel.is_some() {
                    AttentionKind::Performer
                } else {
                    AttentionKind::Explicit
                },
                heads: a.params.heads,
                window: a.params.relpos_bias.cols(),
                affine_features: a
                    .kernel
                    .as_ref()
                    .and_then(|k| k.affine.as_ref().map(|af| af.w.rows())),
            }),
        }
    }

    /// Kernel of the linear attention, or the default for other blocks.
    pub fn kernel_kind(&self) -> KernelKind {
        self.attn
            .as_ref()
            .and_then(|a| a.kernel.as_ref().map(|k| k.kind))
            .unwrap_or_default()
    }
}

/// All weights of a first-pass encoder: a linear input projection followed
/// by the block stack, bottom first.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    pub frontend: Matrix<T>,
    pub frontend_bias: Vec<T>,
    pub blocks: Vec<BlockWeights<T>>,
}

impl<T: Real> Tensors<T> for EncoderWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.frontend.visit(&join(prefix, "frontend"), f);
        self.frontend_bias.visit(&join(prefix, "frontend_bias"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.frontend.visit_mut(&join(prefix, "frontend"), f);
        self.frontend_bias
            .visit_mut(&join(prefix, "frontend_bias"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

impl<T: Real> EncoderWeights<T> {
    fn build(cfg: &EncoderConfig, mut rng: Option<&mut Rng>) -> Result<Self> {
        cfg.validate()?;
        let frontend = match rng.as_deref_mut() {
            Some(r) => uniform(r, cfg.input_dim, cfg.model_dim, cfg.input_dim),
            None => Matrix::zeros(cfg.input_dim, cfg.model_dim),
        };
        let blocks = (0..cfg.total_blocks)
            .map(|i| {
                BlockWeights::new(
                    BlockShape::for_encoder(cfg, i),
                    cfg.kernel.kind,
                    rng.as_deref_mut(),
                )
            })
            .collect();
        Ok(Self {
            frontend,
            frontend_bias: vec![T::zero(); cfg.model_dim],
            blocks,
        })
    }

    /// Zero matrices, zero biases, unit norms, shaped for `cfg`.
    pub fn zeros(cfg: &EncoderConfig) -> Result<Self> {
        Self::build(cfg, None)
    }

    /// Checks that these weights have the layout `cfg` requires.
    pub fn check_matches(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.frontend.shape() != (cfg.input_dim, cfg.model_dim) {
            return Err(Error::config(format!(
                "frontend is {:?}, config wants ({}, {})",
                self.frontend.shape(),
                cfg.input_dim,
                cfg.model_dim
            )));
        }
        if self.blocks.len() != cfg.total_blocks {
            return Err(Error::config(format!(
                "weights have {} blocks, config wants {}",
                self.blocks.len(),
                cfg.total_blocks
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let want = BlockShape::for_encoder(cfg, i);
            if b.shape() != want {
                return Err(Error::config(format!(
                    "block {i} is {:?}, config wants {:?}",
                    b.shape(),
                    want
                )));
            }
            if want
                .attention
                .is_some_and(|a| a.kind == AttentionKind::Performer)
                && b.kernel_kind() != cfg.kernel.kind
            {
                return Err(Error::config(format!(
                    "block {i} kernel differs from config"
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        let mut out = EncoderWeights::<U> {
            frontend: Matrix::zeros(self.frontend.rows(), self.frontend.cols()),
            frontend_bias: vec![U::zero(); self.frontend_bias.len()],
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights::new(b.shape(), b.kernel_kind(), None))
                .collect(),
        };
        copy_values(self, &mut out);
        out
    }
}

/// Copies scalars between two structures with identical layouts.
fn copy_values<S: Real, U: Real>(src: &impl Tensors<S>, dst: &mut impl Tensors<U>) {
    let mut values = Vec::new();
    src.visit("", &mut |_, _, data| {
        values.extend(data.iter().map(|v| v.as_f64()))
    });
    let mut it = values.into_iter();
    dst.visit_mut("", &mut |_, _, data| {
        for v in data.iter_mut() {
            *v = U::of(it.next().expect("same layout"));
        }
    });
}

/// Deterministic weights for `cfg` from `rng`: matrices uniform in
/// `±1/sqrt(fan_in)` (drawn in single precision, so they round-trip through
/// 32-bit storage exactly), biases zero, norms unit.
pub fn init_weights<T: Real>(cfg: &EncoderConfig, rng: &mut Rng) -> Result<EncoderWeights<T>> {
    EncoderWeights::build(cfg, Some(rng))
}

/// Replaces every scalar (including biases and norm parameters) with a
/// Gaussian sample of standard deviation `std`, rounded to single
/// precision. Used to exercise code paths that unit norms and zero biases
/// would hide.
pub fn randomize_all<T: Real, W: Tensors<T>>(weights: &mut W, rng: &mut Rng, std: f64) {
    weights.visit_mut("", &mut |_, _, data| {
        for v in data.iter_mut() {
            *v = T::of((rng.normal() * std) as f32 as f64);
        }
    });
}
