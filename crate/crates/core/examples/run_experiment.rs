//! Runs an experiment file and writes its metrics, trajectory and summary.
//!
//! ```text
//! cargo run --release --example run_experiment -- crates/core/configs/quick.toml out
//! ```

use std::path::PathBuf;

use local_kalman::harness::{emit_outputs, parse_config, run_experiment, summary_json};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/quick.toml")));
    let out_dir = args.next().map_or_else(std::env::temp_dir, PathBuf::from);

    let cfg = parse_config(&config)?;
    let result = run_experiment(&cfg)?;
    for path in emit_outputs(&cfg, &result, &out_dir)? {
        println!("wrote {}", path.display());
    }
    print!("{}", summary_json(&result.summary));
    Ok(())
}
