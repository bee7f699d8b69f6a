mod common;

use common::*;
use ice_core::logger::LogKind;
use ice_core::metrics::{check_expectations, compute_metrics};
use ice_core::scenario::{ScenarioError, ScenarioSpec};
use ice_core::sim::{run, Simulation};
use serde_json::{json, Value};

#[test]
fn every_shipped_scenario_meets_its_expectations() {
    for name in SHIPPED {
        let spec = load(name);
        assert_eq!(spec.name, name);
        let records = common::run(&spec, None);
        let m = compute_metrics(&records).unwrap();
        let missed = check_expectations(&spec.expect, &m);
        assert!(missed.is_empty(), "{name}: {missed:?}");
    }
}

#[test]
fn shipped_files_round_trip_through_the_schema() {
    for name in SHIPPED {
        let spec = load(name);
        let again = ScenarioSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, again, "{name}");
    }
}

#[test]
fn batch_run_writes_log_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&load("xray-unsafe"), Some(5), dir.path()).unwrap();
    assert!(out.log_path.ends_with("xray-unsafe.ndjson"));
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&out.metrics_path).unwrap()).unwrap();
    assert_eq!(written["seed"], 5);
    assert_eq!(written["fatality"], true);
    assert_eq!(out.metrics.seed, 5);
}

fn invalid(mutate: impl FnOnce(&mut Value)) -> (String, String) {
    let mut v: Value = serde_json::from_str(&load("xray-safe").to_json()).unwrap();
    mutate(&mut v);
    match ScenarioSpec::from_json(&v.to_string()) {
        Err(ScenarioError::Validation { path, message }) => (path, message),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn validation_errors_name_the_offending_field() {
    let (path, _) = invalid(|v| v["schema_version"] = json!(2));
    assert_eq!(path, "schema_version");

    let (path, _) = invalid(|v| v["tick_ms"] = json!(5));
    assert_eq!(path, "tick_ms");

    let (path, msg) = invalid(|v| v["event_script"][0]["device"] = json!("ghost"));
    assert_eq!(path, "event_script[0].device");
    assert!(msg.contains("ghost"));

    let (path, _) = invalid(|v| v["event_script"][1]["issuer"] = json!("nobody"));
    assert_eq!(path, "event_script[1].issuer");

    let (path, _) = invalid(|v| v["devices"][1]["device_id"] = json!("vent-1"));
    assert_eq!(path, "devices[1].device_id");

    let (path, _) = invalid(|v| v["bus"] = json!({"drop_probability": 1.5}));
    assert_eq!(path, "bus.drop_probability");

    let (path, _) = invalid(|v| v["event_script"][0]["time_ms"] = json!(99_999_999));
    assert!(path.starts_with("event_script[0]"), "{path}");
}

#[test]
fn type_errors_carry_a_path_too() {
    let (path, _) = invalid(|v| v["devices"][0]["device_kind"] = json!("TOASTER"));
    assert!(path.starts_with("devices[0]"), "{path}");
    let (path, _) = invalid(|v| v["duration_ms"] = json!("long"));
    assert_eq!(path, "duration_ms");
}

#[test]
fn oximeter_hot_swap_resumes_delivery_to_the_interlock() {
    let mut spec = load("pca-safe");
    spec.duration_ms = 300_000;
    spec.event_script = serde_json::from_value(json!([
        {"time_ms": 60000, "event": "fault", "device": "po-1", "kind": "INTERFACE_ERROR", "duration_ms": 30000}
    ]))
    .unwrap();
    let records = common::run(&spec, None);
    let delivered_spo2 = |from: u64, to: u64| {
        records
            .iter()
            .filter(|r| r.kind == LogKind::SampleDelivered && r.actor == "pca-interlock")
            .filter(|r| r.payload["topic"] == "device/pulse_ox/po-1/spo2")
            .filter(|r| (from..to).contains(&r.sim_time_ms))
            .count()
    };
    assert!(delivered_spo2(0, 60_000) > 50);
    assert_eq!(delivered_spo2(61_000, 90_000), 0);
    assert!(delivered_spo2(100_000, 300_000) > 150);
    // While the oximeter was away the interlock failed safe.
    let lockout = events(&records, LogKind::Command, "issued")
        .find(|r| r.actor == "pca-interlock" && r.payload["verb"] == "lockout")
        .expect("fail-safe lockout");
    assert!((60_000..90_000).contains(&lockout.sim_time_ms), "{}", lockout.sim_time_ms);
}

#[test]
fn simulation_steps_are_one_tick_each() {
    let mut sim = Simulation::new(load("glucose-pclc"), None).unwrap();
    for i in 0..10 {
        assert_eq!(sim.now_ms(), i * 1000);
        sim.step().unwrap();
    }
    assert!(!sim.is_finished());
    assert!(!sim.vitals().is_empty());
}
