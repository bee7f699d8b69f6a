//! Ventilator pause for an intraoperative X-ray, with and without the
//! synchronizing app and its watchdog.

use std::path::PathBuf;

use ice_core::metrics::compute_metrics;
use ice_core::scenario::ScenarioSpec;
use ice_core::sim::run_scenario;

fn scenario(name: &str) -> ScenarioSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("scenarios/{name}.json"));
    ScenarioSpec::load(&path).expect("shipped scenario")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for name in ["xray-unsafe", "xray-safe"] {
        let log = run_scenario(&scenario(name), None)?;
        let m = compute_metrics(log.records())?;
        println!("{name}: fatality {} at {:?} ms", m.fatality, m.fatality_at_ms);
        for p in &m.ventilator_pauses {
            let end = if p.open { " (never resumed)" } else { "" };
            println!("  {} paused at {} ms for {} ms{end}", p.device, p.from_ms, p.duration_ms);
        }
    }

    // The watchdog bound holds whatever the noise draws.
    let spec = scenario("xray-safe");
    let worst = (1..=20)
        .map(|seed| {
            let log = run_scenario(&spec, Some(seed)).expect("run");
            compute_metrics(log.records()).expect("metrics").max_pause_ms.unwrap_or(0)
        })
        .max()
        .unwrap_or(0);
    println!("xray-safe over 20 seeds: longest pause {worst} ms");
    Ok(())
}
