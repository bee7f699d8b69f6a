//! Opioid PCA with and without the respiratory interlock.

use std::path::PathBuf;

use ice_core::logger::{reconstruct, LogKind, TimelineFilter};
use ice_core::metrics::compute_metrics;
use ice_core::scenario::ScenarioSpec;
use ice_core::sim::run_scenario;

fn scenario(name: &str) -> ScenarioSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("scenarios/{name}.json"));
    ScenarioSpec::load(&path).expect("shipped scenario")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for name in ["pca-unsafe", "pca-safe"] {
        let spec = scenario(name);
        let log = run_scenario(&spec, None)?;
        let m = compute_metrics(log.records())?;
        println!(
            "{name:<11} RR min {:>4.1}/min  lockouts {}  first at {:?} ms  fatality {} {:?}",
            m.resp_rate_min.unwrap_or(f64::NAN),
            m.lockout_events,
            m.first_lockout_ms,
            m.fatality,
            m.fatality_at_ms
        );
        if let Some(t) = m.first_lockout_ms {
            let filter = TimelineFilter {
                from_ms: Some(t.saturating_sub(2000)),
                to_ms: Some(t + 2000),
                actor: Some("pca-interlock".into()),
                patient: None,
            };
            for e in reconstruct(log.records(), &filter)?.iter().filter(|e| e.kind != LogKind::SampleDelivered) {
                println!("    #{:<6} {:>8} ms {}", e.seq, e.sim_time_ms, e.text);
            }
        }
    }
    Ok(())
}
