//! Times single-frame streaming steps for the baseline and optimized
//! configs and prints host ratios next to the analytic ratios.

use streamformer::bench::{compare, run_bench, BenchSpec};
use streamformer::config::ConfigFile;

fn main() -> streamformer::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");
    let mut reports = Vec::new();
    for name in ["baseline", "optimized"] {
        let file = ConfigFile::load(format!("{dir}/{name}.toml"))?;
        let report = run_bench(&BenchSpec::from_file(name, &file))?;
        print!("{}", report.render());
        reports.push(report);
    }
    println!();
    print!("{}", compare(&reports)?.render());
    Ok(())
}
