//! Runs every shipped scenario, writes logs and metrics, and checks each
//! run against the expectations declared in its file.
//!
//! Usage: cargo run --release --example scenario_batch [out_dir] [seed]

use std::path::PathBuf;

use ice_core::metrics::check_expectations;
use ice_core::scenario::ScenarioSpec;
use ice_core::sim::run;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out".into()));
    let seed = args.next().map(|s| s.parse::<u64>()).transpose()?;

    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut paths: Vec<_> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();

    let mut missed_total = 0;
    for path in paths {
        let spec = ScenarioSpec::load(&path)?;
        let result = run(&spec, seed, &out)?;
        let missed = check_expectations(&spec.expect, &result.metrics);
        missed_total += missed.len();
        println!(
            "{:<17} {:>6} min  fatality {:<5}  commands {:>4}  {}",
            spec.name,
            spec.duration_ms / 60_000,
            result.metrics.fatality,
            result.metrics.commands_issued,
            if missed.is_empty() { "ok".to_string() } else { missed.join("; ") }
        );
    }
    println!("logs and metrics in {}", out.display());
    if missed_total > 0 {
        std::process::exit(1);
    }
    Ok(())
}
