//! Nurse-driven sliding-scale insulin versus the closed-loop controller.

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
    for name in ["glucose-protocol", "glucose-pclc"] {
        let log = run_scenario(&scenario(name), None)?;
        let m = compute_metrics(log.records())?;
        println!(
            "{name}: min {:.1} max {:.1} rebound {:.1} mg/dl, time in range after settle {:.3}",
            m.glucose_min.unwrap_or(f64::NAN),
            m.glucose_max.unwrap_or(f64::NAN),
            m.glucose_rebound.unwrap_or(f64::NAN),
            m.time_in_range_after_settle.unwrap_or(f64::NAN)
        );
        let hourly: Vec<String> = log
            .records()
            .iter()
            .filter(|r| r.kind == LogKind::Lifecycle && r.event() == Some("physiology"))
            .filter(|r| r.sim_time_ms % 3_600_000 == 0)
            .map(|r| format!("{:.0}", r.payload["state"]["glucose"].as_f64().unwrap_or(f64::NAN)))
            .collect();
        println!("  hourly glucose: {}", hourly.join(" "));
    }
    Ok(())
}
