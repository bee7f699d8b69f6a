mod common;

use common::*;
use ice_core::logger::LogKind;
use serde_json::json;

#[test]
fn clean_ward_has_no_security_events() {
    let records = run(&ward(json!({"device_id": "po-2", "device_kind": "PULSE_OX"})), None);
    assert!(security_counts(&records).is_empty(), "{:?}", security_counts(&records));
    assert!(flow(&records, LogKind::SampleDelivered, "po-2") > 0);
}

#[test]
fn forged_credential_is_one_event_and_no_data() {
    let records = run(&ward(forged_oximeter()), None);
    let warnings = security_warnings(&records);
    assert_eq!(warnings.len(), 1, "{warnings:?}");
    assert_eq!(warnings[0].event(), Some("auth_failed"));
    assert_eq!(warnings[0].actor, "po-2");
    assert_eq!(flow(&records, LogKind::SamplePublished, "po-2"), 0);
    assert_eq!(flow(&records, LogKind::SampleDelivered, "po-2"), 0);
}

#[test]
fn denied_topic_is_one_event_and_no_data() {
    let records = run(&ward(unprivileged_oximeter()), None);
    let warnings = security_warnings(&records);
    assert_eq!(warnings.len(), 1, "{warnings:?}");
    assert_eq!(warnings[0].event(), Some("access_denied"));
    assert_eq!(flow(&records, LogKind::SamplePublished, "po-2"), 0);
    assert_eq!(flow(&records, LogKind::SampleDelivered, "po-2"), 0);
}

#[test]
fn qos_mismatch_is_one_event_and_no_delivery() {
    // Plugged in after the monitor is running; at launch time the readiness
    // check would have refused the app instead.
    let records = run(&ward(slow_oximeter()), None);
    let warnings = security_warnings(&records);
    assert_eq!(warnings.len(), 1, "{warnings:?}");
    assert_eq!(warnings[0].event(), Some("qos_mismatch"));
    assert_eq!(warnings[0].payload["offered"]["deadline_ms"], 2000);
    assert_eq!(warnings[0].payload["requested"]["deadline_ms"], 1000);
    assert!(flow(&records, LogKind::SamplePublished, "po-2") > 0);
    assert_eq!(flow(&records, LogKind::SampleDelivered, "po-2"), 0);
    // The well-configured oximeter still reaches the app.
    assert!(flow(&records, LogKind::SampleDelivered, "po-1") > 0);
}

#[test]
fn mismatch_present_at_launch_blocks_the_app() {
    let records = run(
        &ward(json!({
            "device_id": "po-2", "device_kind": "PULSE_OX",
            "streams": [{"stream": "spo2", "period_ms": 1000,
                         "qos": {"reliability": "RELIABLE", "deadline_ms": 2000, "lifespan_ms": 6000, "history_depth": 8}}]
        })),
        None,
    );
    let refused = events(&records, LogKind::Lifecycle, "launch_refused").next().expect("refused");
    assert_eq!(refused.payload["readiness"]["qos_mismatches"][0]["topic"], "device/pulse_ox/po-2/spo2");
    assert_eq!(flow(&records, LogKind::SampleDelivered, "po-1"), 0);
}
