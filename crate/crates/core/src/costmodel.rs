//! Analytic parameter, flop and state accounting.
//!
//! Flops follow the instrumented counter in [`crate::numerics::flops`]: two
//! per multiply-accumulate, one per bias or unit residual add, and fixed
//! per-element charges for norms, softmax and activations. The per-frame
//! figures describe one streaming step of one frame with every cache full.

use serde::{Deserialize, Serialize};

use crate::cascade::cascade_block_shape;
use crate::config::{AttentionKind, CascadeConfig, EncoderConfig, GridEntry};
use crate::conformer::{AttentionShape, BlockShape};
use crate::error::Result;
use crate::numerics::flops;

/// Model-size budget, in parameters.
pub const SIZE_LIMIT: f64 = 50e6;
/// Per-frame compute budget, in flops.
pub const FLOPS_LIMIT: f64 = 100e6;

/// Cost of one module of one block (or of the frontend).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub states: u64,
    pub states_physical: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub flops_per_frame: u64,
    pub states_per_frame: u64,
    pub states_physical: u64,
    pub breakdown: Vec<ModuleCost>,
}

impl CostReport {
    fn from_breakdown(breakdown: Vec<ModuleCost>) -> Self {
        Self {
            params: breakdown.iter().map(|m| m.params).sum(),
            flops_per_frame: breakdown.iter().map(|m| m.flops).sum(),
            states_per_frame: breakdown.iter().map(|m| m.states).sum(),
            states_physical: breakdown.iter().map(|m| m.states_physical).sum(),
            breakdown,
        }
    }

    pub fn within_size(&self, slack: f64) -> bool {
        (self.params as f64) < SIZE_LIMIT * (1.0 + slack)
    }

    pub fn within_flops(&self, slack: f64) -> bool {
        (self.flops_per_frame as f64) < FLOPS_LIMIT * (1.0 + slack)
    }

    /// Human-readable summary with the per-module table.
    pub fn render(&self) -> String {
        let mut s = format!(
            "params           {:>14}\nflops/frame      {:>14}\nstates/frame     {:>14}\nstates physical  {:>14}\n\n",
            self.params, self.flops_per_frame, self.states_per_frame, self.states_physical
        );
        s.push_str(&format!(
            "{:<18} {:>12} {:>12} {:>10} {:>10}\n",
            "module", "params", "flops", "states", "physical"
        ));
        for m in &self.breakdown {
            s.push_str(&format!(
                "{:<18} {:>12} {:>12} {:>10} {:>10}\n",
                m.name, m.params, m.flops, m.states, m.states_physical
            ));
        }
        s
    }
}

/// Attention-cache convention and physical state scalars per frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCount {
    pub paper_convention: u64,
    pub physical: u64,
}

fn norm_params(d: u64) -> u64 {
    2 * d
}

fn ff_cost(d: u64, ffm: u64) -> (u64, u64) {
    let f = ffm * d;
    let params = norm_params(d) + d * f + f + f * d + d;
    let flops = flops::LAYERNORM * d + 2 * d * f + f + flops::SWISH * f + 2 * f * d + d + 2 * d;
    (params, flops)
}

fn conv_cost(d: u64, k: u64) -> (u64, u64) {
    let params = norm_params(d) + 2 * d * d + 2 * d + k * d + d + norm_params(d) + d * d + d;
    let flops = flops::LAYERNORM * d
        + 4 * d * d
        + 2 * d
        + flops::GLU * d
        + (2 * k + 1) * d
        + flops::LAYERNORM * d
        + flops::SWISH * d
        + 2 * d * d
        + d
        + d;
    (params, flops)
}

/// `window` is the number of keys each query sees in steady state.
fn attention_cost(
    d: u64,
    a: &AttentionShape,
    window: u64,
    feature_dim: u64,
) -> (u64, u64, u64, u64) {
    let h = a.heads as u64;
    let hd = d / h;
    let mut params = norm_params(d) + 4 * d * d + h * a.window as u64;
    let mut flops = flops::LAYERNORM * d + 6 * d * d + 2 * d * d + d;
    let (states, physical) = match a.kind {
        AttentionKind::Explicit => {
            let w = window;
            flops += h * (w * 2 * hd + 2 * w + 2 * w * hd + flops::SOFTMAX * w);
            let cached = (window - 1) * d;
            (cached, 2 * cached)
        }
        AttentionKind::Performer => {
            let r = feature_dim;
            let features = match a.affine_features {
                Some(rf) => {
                    let rf = rf as u64;
                    params += rf * hd + rf;
                    2 * rf * hd + rf + flops::KERNEL_FN * rf
                }
                None => flops::KERNEL_FN * hd,
            };
            flops += h * (2 * features + 2 * r * (hd + 1) + 2 * r * (hd + 1) + hd);
            let prefix = h * r * (hd + 1);
            (prefix, prefix)
        }
    };
    (params, flops, states, physical)
}

fn block_costs(prefix: &str, shape: &BlockShape, window: u64, feature_dim: u64) -> Vec<ModuleCost> {
    let d = shape.model_dim as u64;
    let (ffp, fff) = ff_cost(d, shape.ff_expansion as u64);
    let (cp, cf) = conv_cost(d, shape.conv_kernel as u64);
    let module = |name: &str, params, flops, states, physical| ModuleCost {
        name: format!("{prefix}.{name}"),
        params,
        flops,
        states,
        states_physical: physical,
    };
    let mut out = vec![
        module("ff1", ffp, fff, 0, 0),
        module("conv", cp, cf, 0, (shape.conv_kernel as u64 - 1) * d),
    ];
    if let Some(a) = &shape.attention {
        let (p, f, s, ph) = attention_cost(d, a, window, feature_dim);
        out.push(module("attn", p, f, s, ph));
    }
    out.push(module("ff2", ffp, fff, 0, 0));
    out.push(module(
        "final_norm",
        norm_params(d),
        flops::LAYERNORM * d,
        0,
        0,
    ));
    out
}

/// Full cost breakdown of a first-pass encoder.
pub fn cost_report(cfg: &EncoderConfig) -> Result<CostReport> {
    cfg.validate()?;
    let (i, d) = (cfg.input_dim as u64, cfg.model_dim as u64);
    let mut breakdown = vec![ModuleCost {
        name: "frontend".into(),
        params: i * d + d,
        flops: 2 * i * d + d,
        states: 0,
        states_physical: 0,
    }];
    let window = cfg.attn_left_context as u64 + 1;
    for b in 0..cfg.total_blocks {
        let shape = BlockShape::for_encoder(cfg, b);
        breakdown.extend(block_costs(
            &format!("block{b}"),
            &shape,
            window,
            cfg.feature_dim() as u64,
        ));
    }
    Ok(CostReport::from_breakdown(breakdown))
}

pub fn count_params(cfg: &EncoderConfig) -> Result<u64> {
    Ok(cost_report(cfg)?.params)
}

pub fn count_flops_per_frame(cfg: &EncoderConfig) -> Result<u64> {
    Ok(cost_report(cfg)?.flops_per_frame)
}

pub fn count_states_per_frame(cfg: &EncoderConfig) -> Result<StateCount> {
    let r = cost_report(cfg)?;
    Ok(StateCount {
        paper_convention: r.states_per_frame,
        physical: r.states_physical,
    })
}

/// Recurrent state of a stacked LSTM counted the same way: one hidden
/// vector per layer.
pub fn lstm_reference(layers: u64, dim: u64) -> u64 {
    layers * dim
}

/// Parameters of a second pass.
pub fn count_cascade_params(ccfg: &CascadeConfig) -> Result<u64> {
    ccfg.validate()?;
    let (i, d) = (ccfg.input_dim as u64, ccfg.model_dim as u64);
    let mut total = if i != d { i * d + d } else { 0 };
    let r = ccfg.kernel.feature_dim(ccfg.head_dim()) as u64;
    for b in 0..ccfg.blocks {
        let shape = cascade_block_shape(ccfg, b);
        total += block_costs("", &shape, 1, r)
            .iter()
            .map(|m| m.params)
            .sum::<u64>();
    }
    Ok(total)
}

/// Flops counted by the instrumented kernels during one single-frame
/// streaming step after the caches have filled.
pub fn measured_step_flops(cfg: &EncoderConfig, seed: u64) -> Result<u64> {
    let mut rng = crate::numerics::Rng::new(seed);
    let weights = crate::conformer::init_weights::<f32>(cfg, &mut rng)?;
    let mut state = crate::streaming::init_state::<f32>(cfg)?;
    let warm = cfg.attn_left_context.max(cfg.conv_kernel) + 1;
    for _ in 0..warm {
        state.step(&rng.normal_matrix(1, cfg.input_dim, 1.0), &weights, cfg)?;
    }
    let frame = rng.normal_matrix(1, cfg.input_dim, 1.0);
    let (out, n) = flops::measure(|| state.step(&frame, &weights, cfg));
    out?;
    Ok(n)
}

/// One row of a grid report. Invalid variants keep their id and carry the
/// reason in `error`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub id: String,
    pub ffm: Option<usize>,
    pub ncb: Option<usize>,
    pub tb: Option<usize>,
    pub params: Option<u64>,
    pub flops: Option<u64>,
    pub states: Option<u64>,
    pub within_size: bool,
    pub within_flops: bool,
    #[serde(skip)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub slack: f64,
    pub rows: Vec<GridRow>,
}

pub const GRID_HEADER: [&str; 9] = [
    "id",
    "ffm",
    "ncb",
    "tb",
    "params",
    "flops",
    "states",
    "within_size",
    "within_flops",
];

impl GridReport {
    pub fn has_errors(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(GRID_HEADER)?;
        let opt = |v: Option<u64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                opt(r.ffm.map(|v| v as u64)),
                opt(r.ncb.map(|v| v as u64)),
                opt(r.tb.map(|v| v as u64)),
                opt(r.params),
                opt(r.flops),
                opt(r.states),
                r.within_size.to_string(),
                r.within_flops.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<8} {:>4} {:>4} {:>4} {:>12} {:>12} {:>9} {:>6} {:>6}\n",
            "id", "ffm", "ncb", "tb", "params", "flops", "states", "size", "flops"
        );
        for r in &self.rows {
            match &r.error {
                Some(e) => s.push_str(&format!("{:<8} invalid: {e}\n", r.id)),
                None => s.push_str(&format!(
                    "{:<8} {:>4} {:>4} {:>4} {:>12} {:>12} {:>9} {:>6} {:>6}\n",
                    r.id,
                    r.ffm.unwrap_or(0),
                    r.ncb.unwrap_or(0),
                    r.tb.unwrap_or(0),
                    r.params.unwrap_or(0),
                    r.flops.unwrap_or(0),
                    r.states.unwrap_or(0),
                    if r.within_size { "ok" } else { "over" },
                    if r.within_flops { "ok" } else { "over" },
                )),
            }
        }
        s
    }
}

/// Costs every grid variant and flags it against the size and flop
/// budgets scaled by `1 + slack`.
pub fn grid_report(entries: &[GridEntry], slack: f64) -> GridReport {
    let rows = entries
        .iter()
        .map(|e| {
            let invalid = |msg: String| GridRow {
                id: e.id.clone(),
                ffm: None,
                ncb: None,
                tb: None,
                params: None,
                flops: None,
                states: None,
                within_size: false,
                within_flops: false,
                error: Some(msg),
            };
            match &e.config {
                Err(msg) => invalid(msg.clone()),
                Ok(cfg) => match cost_report(cfg) {
                    Err(err) => invalid(err.to_string()),
                    Ok(rep) => GridRow {
                        id: e.id.clone(),
                        ffm: Some(cfg.ff_expansion),
                        ncb: Some(cfg.conv_only_blocks),
                        tb: Some(cfg.total_blocks),
                        params: Some(rep.params),
                        flops: Some(rep.flops_per_frame),
                        states: Some(rep.states_per_frame),
                        within_size: rep.within_size(slack),
                        within_flops: rep.within_flops(slack),
                        error: None,
                    },
                },
            }
        })
        .collect();
    GridReport { slack, rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::init_cascade_weights;
    use crate::conformer::{init_weights, Tensors};
    use crate::numerics::Rng;
    use crate::streaming::state_capacity;
    use crate::verify::random_encoder_config;

    #[test]
    fn flops_match_instrumented_step() {
        let mut rng = Rng::new(31);
        for _ in 0..10 {
            let cfg = random_encoder_config(&mut rng);
            assert_eq!(
                measured_step_flops(&cfg, 3).unwrap(),
                count_flops_per_frame(&cfg).unwrap(),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn tiny_config_by_hand() {
        let cfg = EncoderConfig {
            input_dim: 4,
            model_dim: 4,
            total_blocks: 1,
            conv_only_blocks: 0,
            ff_expansion: 2,
            heads: 1,
            conv_kernel: 3,
            attn_left_context: 2,
            ..EncoderConfig::default()
        };
        // frontend 4·4+4; each ff 8+32+8+32+4; conv 8+32+8+12+4+8+16+4;
        // attn 8+64+3; final norm 8.
        let want = 20 + 2 * 84 + 92 + 75 + 8;
        assert_eq!(count_params(&cfg).unwrap(), want);
    }

    #[test]
    fn params_match_materialized_weights() {
        let mut rng = Rng::new(77);
        for _ in 0..10 {
            let cfg = random_encoder_config(&mut rng);
            let w = init_weights::<f32>(&cfg, &mut Rng::new(0)).unwrap();
            assert_eq!(
                count_params(&cfg).unwrap(),
                w.num_params() as u64,
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn cascade_params_match_materialized_weights() {
        for (kind, d2) in [(AttentionKind::Explicit, 8), (AttentionKind::Performer, 12)] {
            let ccfg = CascadeConfig {
                model_dim: d2,
                heads: 2,
                blocks: 3,
                right_context: 7,
                attention_kind: kind,
                ..CascadeConfig::for_first_pass(8)
            };
            let w = init_cascade_weights::<f32>(&ccfg, &mut Rng::new(0)).unwrap();
            assert_eq!(count_cascade_params(&ccfg).unwrap(), w.num_params() as u64);
        }
    }

    #[test]
    fn doubling_blocks_doubles_block_params() {
        let one = EncoderConfig {
            total_blocks: 6,
            ..EncoderConfig::default()
        };
        let two = EncoderConfig {
            total_blocks: 12,
            ..EncoderConfig::default()
        };
        let front = |c: &EncoderConfig| (c.input_dim * c.model_dim + c.model_dim) as u64;
        assert_eq!(
            count_params(&two).unwrap() - front(&two),
            2 * (count_params(&one).unwrap() - front(&one))
        );
    }

    #[test]
    fn baseline_state_counts() {
        let base = EncoderConfig::default();
        assert_eq!(
            count_states_per_frame(&base).unwrap().paper_convention,
            141_312
        );
        assert_eq!(lstm_reference(8, 640), 5_120);
        let ratio = 141_312.0 / 5_120.0;
        assert_eq!(format!("{ratio:.1}"), "27.6");
    }

    #[test]
    fn states_agree_with_stream_capacity() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let cfg = random_encoder_config(&mut rng);
            let s = count_states_per_frame(&cfg).unwrap();
            let c = state_capacity(&cfg);
            assert_eq!(s.paper_convention, c.scalars_capacity as u64);
            assert_eq!(s.physical, c.physical_capacity as u64);
        }
    }

    #[test]
    fn totals_equal_breakdown() {
        let r = cost_report(&EncoderConfig::default()).unwrap();
        assert_eq!(r.params, r.breakdown.iter().map(|m| m.params).sum::<u64>());
        assert_eq!(
            r.flops_per_frame,
            r.breakdown.iter().map(|m| m.flops).sum::<u64>()
        );
        assert!(r.render().contains("block11.attn"));
    }

    #[test]
    fn all_conv_only_has_no_attention() {
        let cfg = EncoderConfig {
            conv_only_blocks: 12,
            ..EncoderConfig::default()
        };
        let r = cost_report(&cfg).unwrap();
        assert!(r.breakdown.iter().all(|m| !m.name.ends_with("attn")));
        assert_eq!(r.states_per_frame, 0);
    }

    #[test]
    fn monotone_in_knobs() {
        let base = EncoderConfig {
            conv_only_blocks: 2,
            ..EncoderConfig::default()
        };
        let p = |c: &EncoderConfig| cost_report(c).unwrap();
        let b = p(&base);
        for bigger in [
            EncoderConfig {
                ff_expansion: 3,
                ..base.clone()
            },
            EncoderConfig {
                total_blocks: 13,
                ..base.clone()
            },
            EncoderConfig {
                model_dim: 520,
                ..base.clone()
            },
        ] {
            let r = p(&bigger);
            assert!(r.params > b.params && r.flops_per_frame > b.flops_per_frame);
        }
        for kind in [AttentionKind::Explicit, AttentionKind::Performer] {
            let mut prev = p(&EncoderConfig {
                attention_kind: kind,
                conv_only_blocks: 0,
                ..base.clone()
            });
            for ncb in 1..=12 {
                let r = p(&EncoderConfig {
                    attention_kind: kind,
                    conv_only_blocks: ncb,
                    ..base.clone()
                });
                assert!(r.states_per_frame < prev.states_per_frame);
                assert!(r.flops_per_frame < prev.flops_per_frame);
                prev = r;
            }
        }
    }

    #[test]
    fn window_sensitivity_by_kind() {
        let e = |l| EncoderConfig {
            attn_left_context: l,
            ..EncoderConfig::default()
        };
        assert!(count_flops_per_frame(&e(24)).unwrap() > count_flops_per_frame(&e(23)).unwrap());
        let p = |l| EncoderConfig {
            attention_kind: AttentionKind::Performer,
            ..e(l)
        };
        assert_eq!(
            count_flops_per_frame(&p(24)).unwrap(),
            count_flops_per_frame(&p(500)).unwrap()
        );
    }

    #[test]
    fn grid_flags_and_csv() {
        let entries = vec![
            GridEntry {
                id: "a".into(),
                config: Ok(EncoderConfig {
                    model_dim: 816,
                    ..EncoderConfig::default()
                }),
            },
            GridEntry {
                id: "bad".into(),
                config: Err("nope".into()),
            },
        ];
        let g = grid_report(&entries, 0.0);
        assert!(g.has_errors());
        assert!(!g.rows[0].within_size && !g.rows[0].within_flops);
        assert!(grid_report(&entries, 1.5).rows[0].within_size);
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), GRID_HEADER.join(","));
        assert!(lines.next().unwrap().starts_with("a,2,0,12,"));
        assert_eq!(lines.next().unwrap(), "bad,,,,,,,false,false");
    }
}
