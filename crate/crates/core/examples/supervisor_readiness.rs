//! Launch-time readiness checks, forced launches and authenticated
//! clinician overrides, driven step by step.

use std::path::PathBuf;

use ice_core::apps::Directive;
use ice_core::scenario::ScenarioSpec;
use ice_core::sim::Simulation;
use ice_core::supervisor::{AppManifest, SupervisorError};
use serde_json::json;

fn manifest(app_id: &str, needs: &str) -> AppManifest {
    serde_json::from_value(json!({
        "app_id": app_id,
        "required_devices": [{"device_kind": needs}],
        "subscribed_topics": [{"device_kind": "PULSE_OX", "stream": "spo2",
            "qos": {"reliability": "BEST_EFFORT", "deadline_ms": 1000, "lifespan_ms": 5000, "history_depth": 8}}],
        "control_period_ms": 1000,
        "app": {"type": "monitor"}
    }))
    .expect("manifest")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/xray-safe.json");
    let mut sim = Simulation::new(ScenarioSpec::load(&path)?, None)?;
    for _ in 0..5 {
        sim.step()?;
    }

    match sim.launch_app(manifest("rhythm", "ECG"), false) {
        Err(SupervisorError::NotReady { app_id, report }) => {
            println!("{app_id} refused: {}", serde_json::to_string(&report)?);
        }
        other => println!("unexpected: {other:?}"),
    }
    let forced = sim.launch_app(manifest("rhythm", "ECG"), true)?;
    println!("forced launch: {} {:?} forced={}", forced.app_id, forced.status, forced.forced);
    let ok = sim.launch_app(manifest("spo2-watch", "PULSE_OX"), false)?;
    println!("clean launch:  {} {:?}", ok.app_id, ok.status);

    let credential = sim.clinician_credential("dr-lee").expect("dr-lee is on the roster").clone();
    let seq = sim.submit_override("xray-sync", Directive::HoldAutomation, &credential)?;
    println!("override by dr-lee logged as #{seq}");

    let mut forged = credential.clone();
    forged.subject = "dr-okafor".into();
    match sim.submit_override("xray-sync", Directive::ResumeAutomation, &forged) {
        Err(e) => println!("tampered credential: {e}"),
        Ok(seq) => println!("tampered credential accepted as #{seq}"),
    }

    for _ in 0..3 {
        sim.step()?;
    }
    println!("\napps at t={} ms:", sim.now_ms());
    for a in sim.supervisor().apps() {
        println!("  {:<12} {:<10} {:?} pending overrides {}", a.app_id, a.kind, a.status, a.pending_overrides);
    }
    for ev in sim.drain_events().iter().filter(|e| e.kind != "vitals").take(8) {
        println!("  event {} {}", ev.kind, ev.data);
    }
    Ok(())
}
