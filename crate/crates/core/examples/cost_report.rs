//! Size, compute and state counts for the shipped configs.

use streamformer::config::ConfigFile;
use streamformer::costmodel::{cost_report, lstm_reference};

fn main() -> streamformer::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");
    let lstm = lstm_reference(8, 640);
    for name in ["baseline", "optimized", "conv_only"] {
        let file = ConfigFile::load(format!("{dir}/{name}.toml"))?;
        let r = cost_report(&file.encoder)?;
        println!(
            "{name:<10} params {:>10}  flops/frame {:>11}  states/frame {:>7} ({:.1}x lstm)  physical {:>7}",
            r.params,
            r.flops_per_frame,
            r.states_per_frame,
            r.states_per_frame as f64 / lstm as f64,
            r.states_physical,
        );
    }
    Ok(())
}
