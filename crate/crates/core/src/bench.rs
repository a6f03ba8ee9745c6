//! Streaming latency benchmarks on the host CPU.
//!
//! Timings are wall-clock per streaming step on whatever machine runs
//! them, so only ratios between configs measured on the same host mean
//! anything.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::reference::causal_kernel_attention_quadratic;
use crate::attention::{feature_map, performer_causal, KernelSpec};
use crate::config::{AttentionKind, ConfigFile, EncoderConfig};
use crate::conformer::init_weights;
use crate::costmodel::{cost_report, CostReport};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Precision, Real, Rng};
use crate::streaming::init_state;

/// Printed alongside every comparison.
pub const CAVEAT: &str = "note: latencies are host-relative, not TPU; compare ratios only";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub label: String,
    pub config: EncoderConfig,
    pub total_frames: usize,
    pub chunk_size: usize,
    pub warmup_steps: usize,
    pub measured_steps: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl BenchSpec {
    /// Uses the file's `[bench]` section, or its defaults.
    pub fn from_file(label: impl Into<String>, file: &ConfigFile) -> Self {
        let b = file.bench.clone().unwrap_or_default();
        Self {
            label: label.into(),
            config: file.encoder.clone(),
            total_frames: b.frames,
            chunk_size: b.chunk_size,
            warmup_steps: b.warmup,
            measured_steps: b.steps,
            seed: b.seed.unwrap_or(file.encoder.seed),
            precision: b.precision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.measured_steps == 0 {
            return Err(Error::config("bench steps must be at least 1"));
        }
        if self.chunk_size == 0 || self.total_frames == 0 {
            return Err(Error::config(
                "bench frames and chunk_size must be at least 1",
            ));
        }
        Ok(())
    }

    /// Steps the input stream supports: `ceil(frames / chunk)`.
    pub fn available_steps(&self) -> usize {
        self.total_frames.div_ceil(self.chunk_size)
    }

    /// Warmup actually run; always leaves at least one measured step.
    pub fn effective_warmup(&self) -> usize {
        self.warmup_steps.min(self.available_steps() - 1)
    }

    pub fn effective_steps(&self) -> usize {
        self.measured_steps
            .min(self.available_steps() - self.effective_warmup())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub label: String,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub mean_us: f64,
    pub steps: usize,
    pub chunk_size: usize,
    pub precision: Precision,
    pub config_digest: String,
    pub output_checksum: String,
    pub host: String,
    pub cost: CostReport,
}

const CSV_HEADER: [&str; 15] = [
    "label",
    "p50_us",
    "p90_us",
    "p99_us",
    "mean_us",
    "steps",
    "chunk_size",
    "precision",
    "config_digest",
    "output_checksum",
    "host",
    "params",
    "flops_per_frame",
    "states_per_frame",
    "states_physical",
];

impl LatencyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_csv(reports: &[LatencyReport], out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in reports {
            w.write_record([
                r.label.clone(),
                format!("{:.3}", r.p50_us),
                format!("{:.3}", r.p90_us),
                format!("{:.3}", r.p99_us),
                format!("{:.3}", r.mean_us),
                r.steps.to_string(),
                r.chunk_size.to_string(),
                r.precision.to_string(),
                r.config_digest.clone(),
                r.output_checksum.clone(),
                r.host.clone(),
                r.cost.params.to_string(),
                r.cost.flops_per_frame.to_string(),
                r.cost.states_per_frame.to_string(),
                r.cost.states_physical.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        format!(
            "{}: {} steps of {} frame(s), {}\n  p50 {:.1} us  p90 {:.1} us  p99 {:.1} us  mean {:.1} us\n  params {}  flops/frame {}  states/frame {}\n  checksum {}\n  host {}\n",
            self.label,
            self.steps,
            self.chunk_size,
            self.precision,
            self.p50_us,
            self.p90_us,
            self.p99_us,
            self.mean_us,
            self.cost.params,
            self.cost.flops_per_frame,
            self.cost.states_per_frame,
            &self.output_checksum[..16],
            self.host,
        )
    }
}

/// OS, architecture and available parallelism of the current machine.
pub fn host_fingerprint() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{} ({threads} threads)",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

struct RunOutput {
    durations: Vec<Duration>,
    checksum: String,
}

fn stream_all<T: Real>(spec: &BenchSpec, timed: bool) -> Result<RunOutput> {
    let cfg = &spec.config;
    let mut rng = Rng::new(spec.seed);
    let weights = init_weights::<T>(cfg, &mut rng)?;
    let input = rng.normal_matrix::<T>(spec.total_frames, cfg.input_dim, 1.0);
    let mut state = init_state::<T>(cfg)?;
    let warm = spec.effective_warmup();
    let total = warm + spec.effective_steps();
    let mut hasher = Sha256::new();
    let mut durations = Vec::with_capacity(total - warm);
    for s in 0..total {
        let lo = s * spec.chunk_size;
        let chunk = input.slice_rows(lo..(lo + spec.chunk_size).min(spec.total_frames));
        let out = if timed && s >= warm {
            let start = Instant::now();
            let out = state.step(&chunk, &weights, cfg)?;
            durations.push(start.elapsed());
            out
        } else {
            state.step(&chunk, &weights, cfg)?
        };
        for v in out.as_slice() {
            hasher.update(v.as_f64().to_le_bytes());
        }
    }
    let checksum = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(RunOutput {
        durations,
        checksum,
    })
}

fn dispatch(spec: &BenchSpec, timed: bool) -> Result<RunOutput> {
    match spec.precision {
        Precision::F32 => stream_all::<f32>(spec, timed),
        Precision::F64 => stream_all::<f64>(spec, timed),
    }
}

/// Checksum of every streamed output, computed without timing.
pub fn output_checksum(spec: &BenchSpec) -> Result<String> {
    spec.validate()?;
    Ok(dispatch(spec, false)?.checksum)
}

/// Streams seeded synthetic frames through freshly initialized weights,
/// timing each step after the warmup.
pub fn run_bench(spec: &BenchSpec) -> Result<LatencyReport> {
    spec.validate()?;
    let cost = cost_report(&spec.config)?;
    let run = dispatch(spec, true)?;
    let mut us: Vec<f64> = run
        .durations
        .iter()
        .map(|d| d.as_secs_f64() * 1e6)
        .collect();
    us.sort_by(f64::total_cmp);
    let mean = us.iter().sum::<f64>() / us.len() as f64;
    Ok(LatencyReport {
        label: spec.label.clone(),
        p50_us: percentile(&us, 50.0),
        p90_us: percentile(&us, 90.0),
        p99_us: percentile(&us, 99.0),
        mean_us: mean,
        steps: us.len(),
        chunk_size: spec.chunk_size,
        precision: spec.precision,
        config_digest: format!("{:016x}", spec.config.digest()),
        output_checksum: run.checksum,
        host: host_fingerprint(),
        cost,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mean_us: f64,
    /// Baseline mean latency over this report's.
    pub speedup: f64,
    /// Baseline parameters over this report's.
    pub size_ratio: f64,
    /// Baseline flops per frame over this report's.
    pub flops_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<24} {:>12} {:>9} {:>9} {:>9}\n",
            "config", "mean_us", "speedup", "size", "flops"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<24} {:>12.1} {:>8.2}x {:>8.2}x {:>8.2}x\n",
                r.label, r.mean_us, r.speedup, r.size_ratio, r.flops_ratio
            ));
        }
        s.push_str(CAVEAT);
        s.push('\n');
        s
    }
}

/// Ratios of every report against the first one.
pub fn compare(reports: &[LatencyReport]) -> Result<Comparison> {
    let [base, ..] = reports else {
        return Err(Error::config("compare needs at least two reports"));
    };
    if reports.len() < 2 {
        return Err(Error::config("compare needs at least two reports"));
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::NAN };
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            mean_us: r.mean_us,
            speedup: ratio(base.mean_us, r.mean_us),
            size_ratio: ratio(base.cost.params as f64, r.cost.params as f64),
            flops_ratio: ratio(
                base.cost.flops_per_frame as f64,
                r.cost.flops_per_frame as f64,
            ),
        })
        .collect();
    Ok(Comparison { rows })
}

/// Small linear-attention encoder used for position-trend timing.
pub fn trend_config() -> EncoderConfig {
    let mut cfg = EncoderConfig {
        input_dim: 16,
        model_dim: 64,
        total_blocks: 2,
        conv_only_blocks: 0,
        ff_expansion: 2,
        heads: 4,
        conv_kernel: 7,
        attn_left_context: 23,
        attention_kind: AttentionKind::Performer,
        ..EncoderConfig::default()
    };
    cfg.kernel.use_affine = true;
    cfg
}

/// Median step time (µs) of a single-frame stream around each requested
/// position, measured over `window` consecutive steps.
pub fn position_trend(
    cfg: &EncoderConfig,
    positions: &[usize],
    window: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = Rng::new(seed);
    let weights = init_weights::<f32>(cfg, &mut rng)?;
    let frames = rng.normal_matrix::<f32>(256, cfg.input_dim, 1.0);
    let mut state = init_state::<f32>(cfg)?;
    let mut out = Vec::with_capacity(positions.len());
    let mut pos = 0;
    let mut sorted: Vec<usize> = positions.to_vec();
    sorted.sort_unstable();
    let mut medians = std::collections::BTreeMap::new();
    for &target in &sorted {
        while pos < target {
            state.step(&frames.slice_rows(pos % 256..pos % 256 + 1), &weights, cfg)?;
            pos += 1;
        }
        let mut times = Vec::with_capacity(window);
        for _ in 0..window {
            let chunk = frames.slice_rows(pos % 256..pos % 256 + 1);
            let start = Instant::now();
            state.step(&chunk, &weights, cfg)?;
            times.push(start.elapsed().as_secs_f64() * 1e6);
            pos += 1;
        }
        times.sort_by(f64::total_cmp);
        medians.insert(target, percentile(&times, 50.0));
    }
    for p in positions {
        out.push(medians[p]);
    }
    Ok(out)
}

fn random_features(
    rng: &mut Rng,
    t_len: usize,
    hd: usize,
) -> (Matrix<f64>, Matrix<f64>, Matrix<f64>) {
    let spec = KernelSpec::plain(crate::attention::KernelKind::Relu);
    let q = feature_map(&rng.normal_matrix(t_len, hd, 1.0), &spec).expect("shapes");
    let k = feature_map(&rng.normal_matrix(t_len, hd, 1.0), &spec).expect("shapes");
    let v = rng.normal_matrix(t_len, hd, 1.0);
    (q, k, v)
}

fn best_of<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    (0..reps.max(1))
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Seconds (best of `reps`) to attend over a full causal context of
/// `t_len` frames by materializing every pairwise weight.
pub fn dense_context_time(t_len: usize, head_dim: usize, reps: usize) -> f64 {
    let (q, k, v) = random_features(&mut Rng::new(t_len as u64), t_len, head_dim);
    best_of(reps, || {
        std::hint::black_box(causal_kernel_attention_quadratic(&q, &k, &v, 1e-6).expect("shapes"));
    })
}

/// Seconds (best of `reps`) for prefix-sum causal attention over
/// `t_len` frames.
pub fn linear_context_time(t_len: usize, head_dim: usize, reps: usize) -> f64 {
    let (q, k, v) = random_features(&mut Rng::new(t_len as u64), t_len, head_dim);
    best_of(reps, || {
        std::hint::black_box(performer_causal(&q, &k, &v, 1e-6).expect("shapes"));
    })
}
