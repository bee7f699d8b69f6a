//! Device emulators under injected faults: a stuck oximeter, a silent
//! capnometer, an unplugged cable and an occluded insulin line.

use ice_core::logger::LogKind;
use ice_core::scenario::ScenarioSpec;
use ice_core::sim::Simulation;
use serde_json::json;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ScenarioSpec::from_json(
        &json!({
            "schema_version": 1,
            "name": "faults",
            "duration_ms": 120000,
            "devices": [
                {"device_id": "po-1", "device_kind": "PULSE_OX"},
                {"device_id": "cap-1", "device_kind": "CAPNOMETER"},
                {"device_id": "pump-1", "device_kind": "INFUSION_PUMP",
                 "setup": {"drug": "insulin", "running": true, "rate": 2.0}}
            ],
            "clinicians": [{"id": "rn-ortiz"}],
            "event_script": [
                {"time_ms": 10000, "event": "fault", "device": "po-1", "kind": "STUCK_VALUE", "duration_ms": 20000},
                {"time_ms": 40000, "event": "fault", "device": "cap-1", "kind": "NULL_DATA", "duration_ms": 10000},
                {"time_ms": 60000, "event": "fault", "device": "po-1", "kind": "INTERFACE_ERROR", "duration_ms": 20000},
                {"time_ms": 90000, "event": "fault", "device": "pump-1", "kind": "OCCLUSION", "duration_ms": 20000},
                {"time_ms": 95000, "event": "command", "issuer": "rn-ortiz", "device": "pump-1", "verb": "set_rate", "arg": 1.0}
            ]
        })
        .to_string(),
    )?;
    let mut sim = Simulation::new(spec, Some(1))?;
    while !sim.is_finished() {
        sim.step()?;
        if sim.now_ms() % 10_000 == 0 {
            let line: Vec<String> = sim
                .device_views()
                .iter()
                .map(|d| {
                    let fault = d.fault.map(|f| format!(" {f:?}")).unwrap_or_default();
                    let link = if d.connected { "" } else { " (offline)" };
                    format!("{} {}{fault}{link}", d.device_id, d.mode)
                })
                .collect();
            println!("t={:>3}s  {}", sim.now_ms() / 1000, line.join(" | "));
        }
    }

    // What the oximeter actually put on the wire around the stuck window.
    println!("\npo-1 spo2 samples (every 5 s):");
    for r in sim.log().records().iter().filter(|r| {
        r.kind == LogKind::SamplePublished
            && r.payload["topic"] == "device/pulse_ox/po-1/spo2"
            && r.sim_time_ms % 5000 == 0
    }) {
        println!("  t={:>3}s {}", r.sim_time_ms / 1000, r.payload["data"]["spo2"]);
    }
    let nulls = sim
        .log()
        .records()
        .iter()
        .filter(|r| r.kind == LogKind::SamplePublished && r.payload["topic"] == "device/capnometer/cap-1/etco2")
        .filter(|r| r.payload["data"]["etco2"].is_null())
        .count();
    println!("cap-1 published {nulls} samples with no etco2 value");
    Ok(())
}
