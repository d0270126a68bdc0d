//! Run a configuration file and write its outputs.
//!
//! cargo run --release --example experiment -- configs/personalized.json out/

use std::path::PathBuf;

use pmsfl::harness::{run_experiment, RunConfig};

fn main() -> pmsfl::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args.next().map_or_else(|| PathBuf::from("crates/core/configs/pm_sfl.json"), PathBuf::from);
    let out = args.next().map_or_else(|| PathBuf::from("out"), PathBuf::from);
    let cfg = RunConfig::load(&config)?;
    let result = run_experiment(&cfg)?;
    for point in &result.summary.accuracy {
        println!("round {:>4}: mean accuracy {:.3}", point.round, point.mean_accuracy);
    }
    println!("uplink {} B, downlink {} B", result.summary.totals.uplink_bytes, result.summary.totals.downlink_bytes);
    result.write(&out, false)?;
    println!("wrote {}", out.display());
    Ok(())
}
