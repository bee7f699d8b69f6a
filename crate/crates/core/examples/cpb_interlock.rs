//! Weaning from cardiopulmonary bypass with the ventilator left off.

use std::path::PathBuf;

use ice_core::logger::LogKind;
use ice_core::metrics::compute_metrics;
use ice_core::scenario::ScenarioSpec;
use ice_core::sim::run_scenario;

fn scenario(name: &str) -> ScenarioSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("scenarios/{name}.json"));
    ScenarioSpec::load(&path).expect("shipped scenario")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for name in ["cpb-unsafe", "cpb-safe"] {
        let log = run_scenario(&scenario(name), None)?;
        let m = compute_metrics(log.records())?;
        println!("{name}: fatality {} at {:?} ms", m.fatality, m.fatality_at_ms);
        for r in log.records().iter().filter(|r| r.kind == LogKind::Command && r.event() == Some("issued")) {
            println!("  {:>8} ms {} -> {} {}", r.sim_time_ms, r.actor, r.payload["device"], r.payload["verb"]);
        }
        for r in log.records().iter().filter(|r| r.kind == LogKind::Alarm && r.event() == Some("raised")) {
            println!("  {:>8} ms alarm {} {}", r.sim_time_ms, r.payload["acuity"], r.payload["cause"]);
        }
    }
    Ok(())
}
