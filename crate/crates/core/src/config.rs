//! Encoder, cascade and benchmark configuration, plus the strict TOML
//! file formats used by the command-line tool.
//!
//! Unknown keys are rejected everywhere: a misspelled ablation knob must
//! fail loudly rather than silently fall back to a default.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{KernelKind, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::numerics::Precision;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Softmax attention over a bounded window, streamed with a key/value cache.
    #[default]
    Explicit,
    /// Kernelized linear attention, streamed with a prefix-sum state.
    Performer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default)]
    pub kind: KernelKind,
    #[serde(default = "defaults::yes")]
    pub use_affine: bool,
    /// Width `r′` of the affine feature map; defaults to the head dimension.
    #[serde(default)]
    pub feature_dim: Option<usize>,
    /// Floor applied to attention normalizers.
    #[serde(default = "defaults::kernel_eps")]
    pub eps: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kind: KernelKind::Relu,
            use_affine: true,
            feature_dim: None,
            eps: DEFAULT_EPS,
        }
    }
}

impl KernelConfig {
    /// Feature dimension `r` for a given head dimension.
    pub fn feature_dim(&self, head_dim: usize) -> usize {
        if self.use_affine {
            self.feature_dim.unwrap_or(head_dim)
        } else {
            head_dim
        }
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim == Some(0) {
            return Err(Error::config("kernel.feature_dim must be at least 1"));
        }
        if !self.use_affine && self.feature_dim.is_some() {
            return Err(Error::config(
                "kernel.feature_dim requires use_affine = true",
            ));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("kernel.eps must be positive"));
        }
        Ok(())
    }
}

mod defaults {
    pub fn yes() -> bool {
        true
    }
    pub fn kernel_eps() -> f64 {
        crate::attention::DEFAULT_EPS
    }
    pub fn input_dim() -> usize {
        144
    }
    pub fn model_dim() -> usize {
        512
    }
    pub fn total_blocks() -> usize {
        12
    }
    pub fn ff_expansion() -> usize {
        2
    }
    pub fn heads() -> usize {
        8
    }
    pub fn conv_kernel() -> usize {
        15
    }
    pub fn left_context() -> usize {
        23
    }
    pub fn layernorm_eps() -> f64 {
        1e-6
    }
    pub fn cascade_blocks() -> usize {
        5
    }
    pub fn right_context() -> usize {
        30
    }
    pub fn cascade_ffm() -> usize {
        4
    }
    pub fn frames() -> usize {
        256
    }
    pub fn chunk() -> usize {
        1
    }
    pub fn warmup() -> usize {
        32
    }
    pub fn steps() -> usize {
        128
    }
}

/// Full description of a causal first-pass encoder.
///
/// Defaults reproduce the baseline: 144-wide input frames (128 log-mel plus
/// 16 domain-id), 12 blocks of width 512, 8 heads, kernel 15, 23 frames of
/// left context, explicit attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    #[serde(default = "defaults::model_dim")]
    pub model_dim: usize,
    #[serde(default = "defaults::total_blocks")]
    pub total_blocks: usize,
    #[serde(default)]
    pub conv_only_blocks: usize,
    #[serde(default = "defaults::ff_expansion")]
    pub ff_expansion: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "defaults::left_context")]
    pub attn_left_context: usize,
    #[serde(default)]
    pub attention_kind: AttentionKind,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default = "defaults::layernorm_eps")]
    pub layernorm_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        toml::from_str("").expect("all encoder fields have defaults")
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("ff_expansion", self.ff_expansion),
            ("heads", self.heads),
            ("conv_kernel", self.conv_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.conv_only_blocks > self.total_blocks {
            return Err(Error::config(format!(
                "conv_only_blocks ({}) exceeds total_blocks ({})",
                self.conv_only_blocks, self.total_blocks
            )));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::config("layernorm_eps must be positive"));
        }
        self.kernel.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Feature dimension of the linear-attention kernel.
    pub fn feature_dim(&self) -> usize {
        self.kernel.feature_dim(self.head_dim())
    }

    pub fn attention_blocks(&self) -> usize {
        self.total_blocks - self.conv_only_blocks
    }

    /// Blocks `0..conv_only_blocks` sit at the bottom and carry no attention.
    pub fn is_conv_only(&self, block: usize) -> bool {
        block < self.conv_only_blocks
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.attention_kind == AttentionKind::Performer
            && self.attention_blocks() > 0
            && !self.kernel.kind.is_nonnegative()
        {
            out.push(format!(
                "kernel `{}` can emit negative features; attention normalizers may vanish",
                self.kernel.kind
            ));
        }
        out
    }

    /// Stable 64-bit fingerprint of the configuration.
    pub fn digest(&self) -> u64 {
        digest_of(self)
    }
}

pub(crate) fn digest_of<S: Serialize>(value: &S) -> u64 {
    let json = serde_json::to_string(value).expect("config serializes");
    let hash = Sha256::digest(json.as_bytes());
    u64::from_le_bytes(hash[..8].try_into().expect("8 bytes"))
}

/// Non-causal second pass stacked on a first-pass encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// Width of the first-pass output this pass consumes.
    pub input_dim: usize,
    pub model_dim: usize,
    pub blocks: usize,
    /// Total future frames the attention stack may see, split across blocks.
    pub right_context: usize,
    pub left_context: usize,
    pub ff_expansion: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    /// Centered convolutions (each reaching `(k-1)/2` frames ahead) instead
    /// of causal ones.
    pub centered_conv: bool,
    pub attention_kind: AttentionKind,
    pub kernel: KernelConfig,
    pub layernorm_eps: f64,
    pub seed: u64,
}

impl CascadeConfig {
    /// Second pass with the default shape (5 blocks, 30 future frames) on
    /// top of a first pass of width `input_dim`.
    pub fn for_first_pass(input_dim: usize) -> Self {
        CascadeSection::default().to_config(input_dim, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::config("cascade blocks must be at least 1"));
        }
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("ff_expansion", self.ff_expansion),
            ("heads", self.heads),
            ("conv_kernel", self.conv_kernel),
        ] {
            if v == 0 {
                return Err(Error::config(format!("cascade {name} must be at least 1")));
            }
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config("cascade model_dim is not divisible by heads"));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::config("cascade layernorm_eps must be positive"));
        }
        self.kernel.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Lookahead frames given to the attention of each block: an even split
    /// of `right_context`, remainder to the first block.
    pub fn block_lookahead(&self, block: usize) -> usize {
        let base = self.right_context / self.blocks;
        let rem = self.right_context % self.blocks;
        if block == 0 {
            base + rem
        } else {
            base
        }
    }

    /// Future frames a single convolution module reaches.
    pub fn conv_lookahead(&self) -> usize {
        if self.centered_conv {
            (self.conv_kernel - 1) / 2
        } else {
            0
        }
    }

    /// Total future frames any second-pass output may depend on.
    pub fn total_lookahead(&self) -> usize {
        self.right_context + self.blocks * self.conv_lookahead()
    }

    pub fn digest(&self) -> u64 {
        digest_of(self)
    }
}

/// `[cascade]` section of a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "defaults::cascade_blocks")]
    pub blocks: usize,
    #[serde(default = "defaults::right_context")]
    pub right_context: usize,
    #[serde(default = "defaults::left_context")]
    pub left_context: usize,
    /// Defaults to the first-pass width.
    #[serde(default)]
    pub model_dim: Option<usize>,
    #[serde(default = "defaults::cascade_ffm")]
    pub ff_expansion: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "defaults::yes")]
    pub centered_conv: bool,
    #[serde(default)]
    pub attention_kind: AttentionKind,
    #[serde(default)]
    pub kernel: KernelConfig,
}

impl Default for CascadeSection {
    fn default() -> Self {
        toml::from_str("").expect("all cascade fields have defaults")
    }
}

impl CascadeSection {
    pub fn to_config(&self, first_pass_dim: usize, seed: u64) -> CascadeConfig {
        CascadeConfig {
            input_dim: first_pass_dim,
            model_dim: self.model_dim.unwrap_or(first_pass_dim),
            blocks: self.blocks,
            right_context: self.right_context,
            left_context: self.left_context,
            ff_expansion: self.ff_expansion,
            heads: self.heads,
            conv_kernel: self.conv_kernel,
            centered_conv: self.centered_conv,
            attention_kind: self.attention_kind,
            kernel: self.kernel.clone(),
            layernorm_eps: defaults::layernorm_eps(),
            seed: seed.wrapping_add(1),
        }
    }
}

/// `[bench]` section of a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "defaults::frames")]
    pub frames: usize,
    #[serde(default = "defaults::chunk")]
    pub chunk_size: usize,
    #[serde(default = "defaults::warmup")]
    pub warmup: usize,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for BenchSection {
    fn default() -> Self {
        toml::from_str("").expect("all bench fields have defaults")
    }
}

/// A whole config document: `[encoder]`, optional `[cascade]`, optional
/// `[bench]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub cascade: Option<CascadeSection>,
    #[serde(default)]
    pub bench: Option<BenchSection>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        file.encoder.validate()?;
        if let Some(c) = &file.cascade {
            c.to_config(file.encoder.model_dim, file.encoder.seed)
                .validate()?;
        }
        Ok(file)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Overrides every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.encoder.seed = seed;
        if let Some(b) = &mut self.bench {
            b.seed = Some(seed);
        }
    }

    pub fn cascade_config(&self) -> Option<CascadeConfig> {
        self.cascade
            .as_ref()
            .filter(|c| c.enabled)
            .map(|c| c.to_config(self.encoder.model_dim, self.encoder.seed))
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn parse_error(text: &str, err: &toml::de::Error) -> Error {
    let (line, column) = err.span().map_or((0, 0), |s| line_col(text, s.start));
    Error::Parse {
        line,
        column,
        message: err.message().to_string(),
    }
}

/// One variant of a grid file, with its merged configuration or the reason
/// it is invalid.
#[derive(Clone, Debug)]
pub struct GridEntry {
    pub id: String,
    pub config: Result<EncoderConfig, String>,
}

/// Parses a grid document:
///
/// ```toml
/// [base]            # encoder fields shared by every variant
/// model_dim = 512
///
/// [[variant]]
/// id = "E5"
/// ff_expansion = 4
/// conv_only_blocks = 3
/// total_blocks = 7
/// ```
///
/// Document-level problems are errors; problems with a single variant are
/// reported in its entry so the rest of the grid can still run.
pub fn parse_grid(text: &str) -> Result<Vec<GridEntry>> {
    let doc: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    for key in doc.keys() {
        if key != "base" && key != "variant" {
            return Err(Error::Parse {
                line: 0,
                column: 0,
                message: format!("unknown top-level key `{key}`, expected `base` or `variant`"),
            });
        }
    }
    let base = match doc.get("base") {
        None => toml::Table::new(),
        Some(toml::Value::Table(t)) => t.clone(),
        Some(_) => return Err(Error::config("`base` must be a table")),
    };
    let variants = match doc.get("variant") {
        None => Vec::new(),
        Some(toml::Value::Array(a)) => a.clone(),
        Some(_) => return Err(Error::config("`variant` must be an array of tables")),
    };
    let mut out = Vec::with_capacity(variants.len());
    for (i, v) in variants.into_iter().enumerate() {
        let toml::Value::Table(mut table) = v else {
            return Err(Error::config(format!("variant #{i} is not a table")));
        };
        let id = match table.remove("id") {
            Some(toml::Value::String(s)) => s,
            _ => format!("variant{i}"),
        };
        let mut merged = base.clone();
        merged.extend(table);
        let config = merged
            .try_into::<EncoderConfig>()
            .map_err(|e| e.message().to_string())
            .and_then(|c| c.validate().map(|_| c).map_err(|e| e.to_string()));
        out.push(GridEntry { id, config });
    }
    Ok(out)
}
