//! Command-line front end. Exit codes: 0 success, 1 a check or budget
//! failed, 2 usage, parse or I/O error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::{compare, run_bench, BenchSpec, LatencyReport, CAVEAT};
use crate::config::{parse_grid, ConfigFile};
use crate::costmodel::{cost_report, grid_report, lstm_reference, CostReport};
use crate::error::Error;
use crate::verify::{self, Fault, Level};

/// Environment variable that overrides every seed in a config.
pub const SEED_ENV: &str = "STREAMFORMER_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "streamformer",
    version,
    about = "Streaming conformer encoder toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parameter, flop and state counts for one config.
    Cost {
        #[arg(long)]
        config: PathBuf,
        /// Write the per-module breakdown as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Cost every variant of a grid file and flag budget violations.
    Grid {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// Fractional allowance over the size and flop budgets.
        #[arg(long, default_value_t = 0.0)]
        slack: f64,
    },
    /// Time streaming steps on this host.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Write the latency report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Other configs (benchmarked now) or saved JSON reports to compare
        /// against; this config is the baseline.
        #[arg(long, num_args = 1..)]
        compare: Vec<PathBuf>,
    },
    /// Run the oracle self-checks.
    Verify {
        #[arg(long, value_enum, default_value_t = Level::Fast)]
        level: Level,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
}

enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn seed_override() -> std::result::Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Failure::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))
        }),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path, err: &mut dyn Write) -> std::result::Result<ConfigFile, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut file =
        ConfigFile::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed_override()? {
        file.set_seed(seed);
    }
    for w in file.encoder.warnings() {
        writeln!(err, "warning: {w}")?;
    }
    Ok(file)
}

fn write_cost_csv(report: &CostReport, path: &Path) -> crate::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["module", "params", "flops", "states", "states_physical"])?;
    for m in &report.breakdown {
        w.write_record([
            m.name.clone(),
            m.params.to_string(),
            m.flops.to_string(),
            m.states.to_string(),
            m.states_physical.to_string(),
        ])?;
    }
    w.write_record([
        "total".to_string(),
        report.params.to_string(),
        report.flops_per_frame.to_string(),
        report.states_per_frame.to_string(),
        report.states_physical.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

fn cmd_cost(
    config: &Path,
    csv: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Outcome {
    let file = load_config(config, err)?;
    let report = cost_report(&file.encoder)?;
    write!(out, "{}", report.render())?;
    let lstm = lstm_reference(8, 640);
    writeln!(
        out,
        "\nstates vs 8x640 recurrent reference ({lstm}): {:.1}x",
        report.states_per_frame as f64 / lstm as f64
    )?;
    writeln!(
        out,
        "size budget: {}\nflops budget: {}",
        if report.within_size(0.0) {
            "within"
        } else {
            "exceeded"
        },
        if report.within_flops(0.0) {
            "within"
        } else {
            "exceeded"
        },
    )?;
    if let Some(c) = file.cascade_config() {
        writeln!(
            out,
            "second pass params: {}",
            crate::costmodel::count_cascade_params(&c)?
        )?;
    }
    if let Some(path) = csv {
        write_cost_csv(&report, path)?;
    }
    Ok(())
}

fn cmd_grid(grid: &Path, csv: &Path, slack: f64, out: &mut dyn Write) -> Outcome {
    let text = std::fs::read_to_string(grid)
        .map_err(|e| Failure::Usage(format!("{}: {e}", grid.display())))?;
    let mut entries =
        parse_grid(&text).map_err(|e| Failure::Usage(format!("{}: {e}", grid.display())))?;
    if entries.is_empty() {
        return Err(Failure::Check("no configs".into()));
    }
    if let Some(seed) = seed_override()? {
        for e in &mut entries {
            if let Ok(c) = &mut e.config {
                c.seed = seed;
            }
        }
    }
    let report = grid_report(&entries, slack);
    report.write_csv(std::fs::File::create(csv)?)?;
    write!(out, "{}", report.render())?;
    if report.has_errors() {
        return Err(Failure::Check(
            "one or more grid variants are invalid".into(),
        ));
    }
    Ok(())
}

fn bench_path(path: &Path, err: &mut dyn Write) -> std::result::Result<LatencyReport, Failure> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        return Ok(LatencyReport::from_json(&text)?);
    }
    let file = load_config(path, err)?;
    let label = path
        .file_stem()
        .map_or("config".into(), |s| s.to_string_lossy().into_owned());
    Ok(run_bench(&BenchSpec::from_file(label, &file))?)
}

fn cmd_bench(
    config: &Path,
    json: Option<&Path>,
    others: &[PathBuf],
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Outcome {
    let mut reports = vec![bench_path(config, err)?];
    for p in others {
        reports.push(bench_path(p, err)?);
    }
    write!(out, "{}", reports[0].render())?;
    if let Some(path) = json {
        std::fs::write(path, reports[0].to_json()?)?;
    }
    if reports.len() > 1 {
        writeln!(out)?;
        write!(out, "{}", compare(&reports)?.render())?;
    } else {
        writeln!(out, "{CAVEAT}")?;
    }
    Ok(())
}

fn cmd_verify(level: Level, fault: Option<Fault>, out: &mut dyn Write) -> Outcome {
    let report = verify::run(level, fault)?;
    write!(out, "{}", report.render())?;
    if report.passed() {
        Ok(())
    } else {
        let seed = report
            .suites
            .iter()
            .find_map(|s| s.first_failure.map(|f| (s.name, f)));
        let (name, seed) = seed.expect("a failing suite has a seed");
        Err(Failure::Check(format!(
            "{name} failed; first counterexample seed {seed}"
        )))
    }
}

/// Runs the tool with `args` (program name first) and returns the exit code.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Cost { config, csv } => cmd_cost(config, csv.as_deref(), out, err),
        Command::Grid { grid, csv, slack } => cmd_grid(grid, csv, *slack, out),
        Command::Bench {
            config,
            json,
            compare,
        } => cmd_bench(config, json.as_deref(), compare, out, err),
        Command::Verify {
            level,
            inject_fault,
        } => cmd_verify(*level, *inject_fault, out),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Check(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}
