mod common;

use common::*;
use ice_core::logger::LogKind;
use ice_core::sim::Simulation;
use ice_core::supervisor::AppStatus;

#[test]
fn busy_app_leaves_pclc_commands_untouched() {
    let mut spec = load("glucose-pclc");
    spec.duration_ms = 2 * 3_600_000;
    let report = partition_check(&spec, busy_entry("GLUCOMETER", "glucose", 60_000));
    assert!(report.baseline_commands > 100);
    assert!(report.differing_issuers.is_empty(), "{:?}", report.differing_issuers);
    assert!(report.busy_budget_records > 0);
    assert_eq!(report.busy_commands, 0);
}

#[test]
fn busy_app_leaves_safety_interlocks_untouched() {
    let report = partition_check(&load("xray-safe"), busy_entry("PULSE_OX", "spo2", 1000));
    assert!(report.baseline_commands > 0);
    assert!(report.differing_issuers.is_empty(), "{:?}", report.differing_issuers);
    assert!(report.busy_budget_records > 0);
}

#[test]
fn busy_app_is_degraded_and_flagged_while_others_run() {
    let mut spec = load("xray-safe");
    spec.duration_ms = 30_000;
    spec.event_script.clear();
    spec.apps.push(busy_entry("PULSE_OX", "spo2", 1000));
    let mut sim = Simulation::new(spec, None).unwrap();
    sim.run_to_end().unwrap();
    let sup = sim.supervisor();
    assert_eq!(sup.instance("busy").unwrap().status, AppStatus::Degraded);
    for id in ["xray-sync", "monitor"] {
        assert_eq!(sup.instance(id).unwrap().status, AppStatus::Running, "{id}");
    }
    let flagged = sup
        .alarms()
        .history()
        .iter()
        .filter(|a| a.cause == "app.budget_exceeded.busy")
        .count();
    assert_eq!(flagged, 1, "coalesced into one alarm");
    let over_budget = sim
        .log()
        .records()
        .iter()
        .filter(|r| r.kind == LogKind::Lifecycle && r.event() == Some("budget_exceeded"))
        .all(|r| r.payload["app_id"] == "busy");
    assert!(over_budget);
}
