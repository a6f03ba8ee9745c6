//! Self-check suites run by `streamformer verify`: every fast path against
//! an independent oracle, on seeded random instances.

use crate::attention::reference::{dense_kernel_attention, dense_masked_softmax_attention};
use crate::attention::{
    explicit_local_causal_attention, fault, feature_map, performer_attention, performer_causal,
    AttentionParams, KernelKind, KernelSpec,
};
use crate::bench::{dense_context_time, linear_context_time, position_trend, trend_config};
use crate::cascade::{init_cascade_weights, second_pass_forward};
use crate::config::{parse_grid, AttentionKind, CascadeConfig, EncoderConfig};
use crate::conformer::{
    conv_module, encoder_forward, init_weights, randomize_all, BlockShape, BlockWeights, Tensors,
};
use crate::costmodel::{count_flops_per_frame, count_params, measured_step_flops};
use crate::error::Result;
use crate::numerics::{Matrix, Real, Rng};
use crate::streaming::init_state;

/// The shipped resizing grid.
pub const RESIZE_GRID: &str = include_str!("../configs/resize_grid.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Level {
    Fast,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checks: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Seed of the first failing instance.
    pub first_failure: Option<u64>,
    pub note: String,
}

impl SuiteResult {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            checks: 0,
            max_error: 0.0,
            tolerance,
            first_failure: None,
            note: String::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }

    /// Records one instance whose error must stay within the tolerance.
    fn record(&mut self, seed: u64, err: f64) {
        self.checks += 1;
        if err.is_nan() || err > self.max_error {
            self.max_error = err;
        }
        if !(err <= self.tolerance) && self.first_failure.is_none() {
            self.first_failure = Some(seed);
        }
    }

    /// Records a yes/no property.
    fn require(&mut self, seed: u64, ok: bool) {
        self.record(seed, if ok { 0.0 } else { f64::INFINITY });
    }

    pub fn render(&self) -> String {
        let status = if self.passed() { "pass" } else { "FAIL" };
        let mut s = format!(
            "{status}  {:<22} {:>5} checks  max error {:.3e} (tol {:.0e})",
            self.name, self.checks, self.max_error, self.tolerance
        );
        if let Some(seed) = self.first_failure {
            s.push_str(&format!("  first failing seed {seed}"));
        }
        if !self.note.is_empty() {
            s.push_str(&format!("  [{}]", self.note));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn render(&self) -> String {
        let mut s: String = self.suites.iter().map(|r| r.render() + "\n").collect();
        s.push_str(if self.passed() {
            "all checks passed\n"
        } else {
            "some checks FAILED\n"
        });
        s
    }
}

/// Faults that can be switched on to confirm the checks catch them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Skip the denominator of the prefix-sum read.
    PerformerNorm,
}

/// Runs every suite. With `fault`, the named corruption is active for the
/// duration of the run.
pub fn run(level: Level, fault: Option<Fault>) -> Result<VerifyReport> {
    struct Reset;
    impl Drop for Reset {
        fn drop(&mut self) {
            fault::set_skip_normalization(false);
        }
    }
    let _reset = Reset;
    fault::set_skip_normalization(fault == Some(Fault::PerformerNorm));

    let scale = if level == Level::Full { 3 } else { 1 };
    let mut suites = vec![
        performer_vs_dense(100 * scale as u64)?,
        batch_vs_stream(50 * scale as u64)?,
        causality(20 * scale as u64)?,
        cost_crosscheck(level)?,
    ];
    if level == Level::Full {
        suites.push(complexity_trend()?);
    }
    Ok(VerifyReport { suites })
}

/// Random small encoder config covering both attention kinds, every
/// conv-only split and optional affine features.
pub fn random_encoder_config(rng: &mut Rng) -> EncoderConfig {
    let heads = 1 + rng.below(3);
    let tb = 1 + rng.below(4);
    let mut cfg = EncoderConfig {
        input_dim: 1 + rng.below(6),
        model_dim: heads * (1 + rng.below(4)),
        total_blocks: tb,
        conv_only_blocks: rng.below(tb + 1),
        ff_expansion: 1 + rng.below(4),
        heads,
        conv_kernel: 1 + rng.below(5),
        attn_left_context: rng.below(6),
        attention_kind: if rng.coin() {
            AttentionKind::Performer
        } else {
            AttentionKind::Explicit
        },
        seed: rng.next_u64(),
        ..EncoderConfig::default()
    };
    cfg.kernel.kind = KernelKind::ALL[rng.below(KernelKind::ALL.len())];
    if cfg.kernel.kind == KernelKind::Elu {
        cfg.kernel.kind = KernelKind::Relu;
    }
    cfg.kernel.use_affine = rng.coin();
    if cfg.kernel.use_affine && rng.coin() {
        cfg.kernel.feature_dim = Some(1 + rng.below(6));
    }
    cfg
}

/// Random chunk sizes (zeros included) covering `t_len` frames.
pub fn random_chunking(rng: &mut Rng, t_len: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut left = t_len;
    while left > 0 {
        let c = rng.below(7).min(left);
        sizes.push(c);
        left -= c;
    }
    sizes
}

/// Streams `x` through fresh state in the given chunks.
pub fn stream_in_chunks<T: Real>(
    x: &Matrix<T>,
    weights: &crate::conformer::EncoderWeights<T>,
    cfg: &EncoderConfig,
    sizes: &[usize],
) -> Result<Matrix<T>> {
    let mut state = init_state::<T>(cfg)?;
    let mut out = Matrix::zeros(0, cfg.model_dim);
    let mut at = 0;
    for &c in sizes {
        out.append_rows(&state.step(&x.slice_rows(at..at + c), weights, cfg)?)?;
        at += c;
    }
    Ok(out)
}

/// One random causal kernel-attention instance: feature maps of random
/// queries and keys, and random values.
pub fn random_kernel_instance(seed: u64) -> (KernelKind, Matrix<f64>, Matrix<f64>, Matrix<f64>) {
    let mut rng = Rng::new(seed);
    let kind = KernelKind::ALL[(seed % 5) as usize];
    let t_len = 1 + rng.below(64);
    let hd = 1 + rng.below(16);
    let spec = if rng.coin() {
        let r = 1 + rng.below(16);
        KernelSpec::with_affine(kind, rng.normal_matrix(r, hd, 0.5), rng.normal_vec(r, 0.1))
            .expect("shapes")
    } else {
        KernelSpec::plain(kind)
    };
    let qp = feature_map(&rng.normal_matrix(t_len, hd, 0.7), &spec).expect("shapes");
    let kp = feature_map(&rng.normal_matrix(t_len, hd, 0.7), &spec).expect("shapes");
    let v = rng.normal_matrix(t_len, hd, 1.0);
    (kind, qp, kp, v)
}

fn performer_vs_dense(instances: u64) -> Result<SuiteResult> {
    let mut s = SuiteResult::new("performer-vs-dense", 1e-6);
    for seed in 0..instances {
        let (_, qp, kp, v) = random_kernel_instance(seed);
        let got = performer_causal(&qp, &kp, &v, 1e-6)?;
        let want = dense_kernel_attention(&qp, &kp, &v, true, 1e-6)?;
        s.record(seed, got.max_rel_diff(&want));
    }
    Ok(s)
}

fn batch_vs_stream(instances: u64) -> Result<SuiteResult> {
    let mut s = SuiteResult::new("batch-vs-stream", 1e-10);
    let mut worst32: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = Rng::new(1000 + seed);
        let cfg = random_encoder_config(&mut rng);
        let mut w = init_weights::<f64>(&cfg, &mut rng)?;
        randomize_all(&mut w, &mut rng, 0.3);
        let t_len = 1 + rng.below(40);
        let x = rng.normal_matrix::<f64>(t_len, cfg.input_dim, 1.0);
        let sizes = random_chunking(&mut rng, t_len);
        let batch = encoder_forward(&x, &w, &cfg)?;
        s.record(
            seed,
            stream_in_chunks(&x, &w, &cfg, &sizes)?.max_rel_diff(&batch),
        );

        let w32 = w.cast::<f32>();
        let x32 = x.cast::<f32>();
        let batch32 = encoder_forward(&x32, &w32, &cfg)?;
        let err32 = stream_in_chunks(&x32, &w32, &cfg, &sizes)?.max_rel_diff(&batch32);
        worst32 = worst32.max(err32);
        // Scaled so one tolerance covers both precisions.
        s.record(seed, err32 * 1e-5);
    }
    s.note = format!("f32 max error {worst32:.3e} (tol 1e-5)");
    Ok(s)
}

fn perturb_after(x: &Matrix<f64>, t: usize, rng: &mut Rng) -> Matrix<f64> {
    let mut y = x.clone();
    for r in t + 1..y.rows() {
        for v in y.row_mut(r) {
            *v += rng.normal();
        }
    }
    y
}

fn prefix_unchanged(a: &Matrix<f64>, b: &Matrix<f64>, t: usize) -> bool {
    (0..=t).all(|r| a.row(r) == b.row(r))
}

fn causality(seeds: u64) -> Result<SuiteResult> {
    let mut s = SuiteResult::new("causality", 0.0);
    for seed in 0..seeds {
        let mut rng = Rng::new(5000 + seed);
        let cfg = random_encoder_config(&mut rng);
        let d = cfg.model_dim;
        let t_len = 2 + rng.below(20);
        let t = rng.below(t_len - 1);

        let mut block =
            BlockWeights::<f64>::new(BlockShape::for_encoder(&cfg, 0), cfg.kernel.kind, None);
        randomize_all(&mut block, &mut rng, 0.4);
        let x = rng.normal_matrix::<f64>(t_len, d, 1.0);
        let y = perturb_after(&x, t, &mut rng);
        let k = cfg.conv_kernel;
        let conv = |m: &Matrix<f64>| conv_module(m, &block.conv, 1e-6, k - 1, 0);
        s.require(seed, prefix_unchanged(&conv(&x)?, &conv(&y)?, t));

        let mut params = AttentionParams::identity(d, cfg.heads, cfg.attn_left_context + 1);
        randomize_all_params(&mut params, &mut rng);
        let local =
            |m: &Matrix<f64>| explicit_local_causal_attention(m, &params, cfg.attn_left_context);
        s.require(seed, prefix_unchanged(&local(&x)?, &local(&y)?, t));
        let dense = dense_masked_softmax_attention(&x, &params, cfg.attn_left_context, 0)?;
        s.require(seed, local(&x)?.max_rel_diff(&dense) < 1e-9);

        let p0 = AttentionParams {
            relpos_bias: Matrix::zeros(cfg.heads, 0),
            ..params.clone()
        };
        let spec = KernelSpec::plain(KernelKind::Relu);
        let perf = |m: &Matrix<f64>| performer_attention(m, &p0, &spec, true, 1e-6);
        s.require(seed, prefix_unchanged(&perf(&x)?, &perf(&y)?, t));

        let w = init_weights::<f64>(&cfg, &mut rng)?;
        let fx = rng.normal_matrix::<f64>(t_len, cfg.input_dim, 1.0);
        let fy = perturb_after(&fx, t, &mut rng);
        s.require(
            seed,
            prefix_unchanged(
                &encoder_forward(&fx, &w, &cfg)?,
                &encoder_forward(&fy, &w, &cfg)?,
                t,
            ),
        );

        let ccfg = CascadeConfig {
            input_dim: d,
            model_dim: d,
            heads: cfg.heads,
            blocks: 1 + rng.below(3),
            right_context: rng.below(6),
            left_context: rng.below(5),
            conv_kernel: 1 + rng.below(5),
            ff_expansion: 2,
            centered_conv: rng.coin(),
            attention_kind: AttentionKind::Explicit,
            ..CascadeConfig::for_first_pass(d)
        };
        let cw = init_cascade_weights::<f64>(&ccfg, &mut rng)?;
        let reach = ccfg.total_lookahead();
        let first = rng.normal_matrix::<f64>(t_len + reach + 2, d, 1.0);
        let t2 = rng.below(t_len);
        let moved = perturb_after(&first, t2 + reach, &mut rng);
        let a = second_pass_forward(&first, &cw, &ccfg)?;
        let b = second_pass_forward(&moved, &cw, &ccfg)?;
        s.require(seed, prefix_unchanged(&a, &b, t2));
    }
    Ok(s)
}

fn randomize_all_params(p: &mut AttentionParams<f64>, rng: &mut Rng) {
    for m in [
        &mut p.wq,
        &mut p.wk,
        &mut p.wv,
        &mut p.wo,
        &mut p.relpos_bias,
    ] {
        *m = rng.normal_matrix(m.rows(), m.cols(), 0.5);
    }
}

/// Grid configs plus random ones, for the cost cross-checks.
pub fn crosscheck_configs(random: usize, seed: u64) -> Result<Vec<(String, EncoderConfig)>> {
    let mut out = Vec::new();
    for e in parse_grid(RESIZE_GRID)? {
        let cfg = e.config.map_err(crate::Error::InvalidConfig)?;
        out.push((e.id, cfg));
    }
    let mut rng = Rng::new(seed);
    for i in 0..random {
        out.push((format!("random{i}"), random_encoder_config(&mut rng)));
    }
    Ok(out)
}

fn cost_crosscheck(level: Level) -> Result<SuiteResult> {
    let mut s = SuiteResult::new("cost-crosscheck", 0.0);
    let configs = match level {
        Level::Full => crosscheck_configs(10, 42)?,
        Level::Fast => {
            let mut rng = Rng::new(42);
            (0..10)
                .map(|i| (format!("random{i}"), random_encoder_config(&mut rng)))
                .collect()
        }
    };
    for (i, (_, cfg)) in configs.iter().enumerate() {
        let census = init_weights::<f32>(cfg, &mut Rng::new(cfg.seed))?.num_params() as u64;
        s.require(i as u64, census == count_params(cfg)?);
        s.require(
            i as u64,
            measured_step_flops(cfg, i as u64)? == count_flops_per_frame(cfg)?,
        );
    }
    s.note = format!("{} configs", configs.len());
    Ok(s)
}

fn complexity_trend() -> Result<SuiteResult> {
    let mut s = SuiteResult::new("complexity-trend", 0.0);
    let pos = position_trend(&trend_config(), &[100, 10_000], 64, 1)?;
    let position_ratio = pos[1] / pos[0];
    s.require(0, position_ratio < 1.5);
    let dense_ratio = dense_context_time(4096, 16, 2) / dense_context_time(2048, 16, 2);
    s.require(1, dense_ratio > 3.0);
    let linear_ratio = linear_context_time(4096, 16, 5) / linear_context_time(2048, 16, 5);
    s.require(2, (1.6..=2.6).contains(&linear_ratio));
    s.note = format!(
        "step 10000/100 {position_ratio:.2}, dense 4096/2048 {dense_ratio:.2}, linear 4096/2048 {linear_ratio:.2}"
    );
    Ok(s)
}
