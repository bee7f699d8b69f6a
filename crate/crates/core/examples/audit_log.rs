//! Writing, verifying, tampering with and replaying the audit log.

use std::path::PathBuf;

use ice_core::logger::{read_log, reconstruct, require_intact, verify_chain, write_records, ChainStatus, TimelineFilter};
use ice_core::metrics::compute_metrics;
use ice_core::scenario::ScenarioSpec;
use ice_core::sim::run_scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/xray-unsafe.json");
    let log = run_scenario(&ScenarioSpec::load(&path)?, Some(11))?;
    let dir = std::env::temp_dir().join("ice-audit-example");
    std::fs::create_dir_all(&dir)?;
    let file = dir.join("xray-unsafe.ndjson");
    log.write_to(&file)?;
    println!("wrote {} records to {}", log.len(), file.display());

    let records = read_log(&file)?;
    println!("chain: {:?}", verify_chain(&records)?);

    // What dr-okafor did around the exposure.
    let filter = TimelineFilter {
        from_ms: Some(599_000),
        to_ms: Some(602_000),
        actor: Some("dr-okafor".into()),
        patient: None,
    };
    for e in reconstruct(&records, &filter)? {
        println!("  #{:<5} {:>7} ms {:<10} {}", e.seq, e.sim_time_ms, e.actor, e.text);
    }

    // Quietly improve a vital sign and re-serialize everything downstream.
    let mut edited = records.clone();
    let victim = edited.iter().position(|r| r.payload["data"]["spo2"].is_object()).expect("an spo2 sample");
    edited[victim].payload["data"]["spo2"]["value"] = 99.9.into();
    let tampered = dir.join("tampered.ndjson");
    write_records(&edited, &tampered)?;
    let reread = read_log(&tampered)?;
    match verify_chain(&reread)? {
        ChainStatus::FirstBad(seq) => println!("tampered copy: first bad record #{seq} (edited #{})", edited[victim].seq),
        ChainStatus::Ok => println!("tampered copy verified (should not happen)"),
    }
    if let Err(e) = require_intact(&reread).and_then(|_| compute_metrics(&reread).map(|_| ())) {
        println!("metrics refused: {e}");
    }
    Ok(())
}
