//! Costs every variant of the resize grid and flags budget violations.

use streamformer::config::parse_grid;
use streamformer::costmodel::grid_report;

fn main() -> streamformer::Result<()> {
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/configs/resize_grid.toml"
    ))?;
    let entries = parse_grid(&text)?;
    for slack in [0.0, 0.2] {
        println!("slack {slack}");
        print!("{}", grid_report(&entries, slack).render());
    }
    Ok(())
}
