mod common;

use std::net::SocketAddr;
use std::time::Duration;

use common::load;
use futures::StreamExt;
use ice_core::serve::{start, ServeError, ServerHandle};
use reqwest::StatusCode;
use serde_json::{json, Value};

async fn session(speed: f64) -> (ServerHandle, String) {
    let h = start(load("xray-safe"), None, SocketAddr::from(([127, 0, 0, 1], 0)), speed)
        .await
        .unwrap();
    let base = format!("http://{}", h.addr);
    (h, base)
}

async fn login(c: &reqwest::Client, base: &str, who: &str) -> Value {
    let r = c.post(format!("{base}/api/login")).json(&json!({"clinician_id": who})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    r.json().await.unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn read_endpoints_describe_the_bedside() {
    let (h, base) = session(50.0).await;
    let c = reqwest::Client::new();
    tokio::time::sleep(Duration::from_millis(200)).await;

    let devices: Vec<Value> = c.get(format!("{base}/api/devices")).send().await.unwrap().json().await.unwrap();
    let ids: Vec<&str> = devices.iter().map(|d| d["device_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 4, "{ids:?}");
    assert!(ids.contains(&"vent-1"));

    let apps: Vec<Value> = c.get(format!("{base}/api/apps")).send().await.unwrap().json().await.unwrap();
    let xray = apps.iter().find(|a| a["app_id"] == "xray-sync").expect("xray app listed");
    assert_eq!(xray["status"], "RUNNING");

    let vitals: Value = c.get(format!("{base}/api/patient/vitals")).send().await.unwrap().json().await.unwrap();
    assert_eq!(vitals["patient_id"], "patient-1");
    assert!(vitals["sim_time_ms"].as_u64().unwrap() > 0);

    let alarms: Value = c.get(format!("{base}/api/alarms")).send().await.unwrap().json().await.unwrap();
    assert!(alarms["active"].is_array() && alarms["history"].is_array());
    h.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn overrides_require_a_valid_clinician_credential() {
    let (h, base) = session(20.0).await;
    let c = reqwest::Client::new();
    let cred = login(&c, &base, "dr-lee").await;
    assert_eq!(cred["role"], "clinician");

    let url = format!("{base}/api/apps/xray-sync/override");
    let r = c
        .post(&url)
        .json(&json!({"directive": {"directive": "hold_automation"}, "credential": cred}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::ACCEPTED);
    let body: Value = r.json().await.unwrap();
    let seq = body["log_seq"].as_u64().unwrap();
    let logged = h.with_sim(|s| s.log().records()[seq as usize - 1].clone());
    assert_eq!(logged.actor, "dr-lee");
    assert_eq!(logged.payload["directive"]["directive"], "hold_automation");

    let mut forged = cred.clone();
    forged["mac"] = json!("00".repeat(32));
    let r = c
        .post(&url)
        .json(&json!({"directive": {"directive": "hold_automation"}, "credential": forged}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let err: Value = r.json().await.unwrap();
    assert_eq!(err["error"], "AUTH_FAILED");

    let r = c
        .post(format!("{base}/api/apps/nope/override"))
        .json(&json!({"directive": {"directive": "hold_automation"}, "credential": cred}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);

    let r = c.post(&url).body("{not json").header("content-type", "application/json").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    let r = c.post(format!("{base}/api/login")).json(&json!({"clinician_id": "mallory"})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);

    let r = c
        .post(format!("{base}/api/alarms/99999/ack"))
        .json(&json!({"credential": cred}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    h.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn launching_apps_goes_through_readiness() {
    let (h, base) = session(20.0).await;
    let c = reqwest::Client::new();
    let url = format!("{base}/api/apps");
    let manifest = |id: &str, kind: &str| {
        json!({
            "app_id": id,
            "required_devices": [{"device_kind": kind}],
            "subscribed_topics": [{"device_kind": "PULSE_OX", "stream": "spo2",
                "qos": {"reliability": "BEST_EFFORT", "deadline_ms": 1000, "lifespan_ms": 5000, "history_depth": 8}}],
            "control_period_ms": 1000,
            "app": {"type": "monitor"}
        })
    };

    let r = c.post(&url).json(&manifest("watch-2", "PULSE_OX")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    let r = c.post(&url).json(&manifest("watch-2", "PULSE_OX")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);

    let r = c.post(&url).json(&manifest("needs-ecg", "ECG")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let err: Value = r.json().await.unwrap();
    assert_eq!(err["error"], "NOT_READY");
    assert_eq!(err["details"]["missing_devices"][0][0], "ECG");

    let r = c.post(format!("{url}?force=true")).json(&manifest("needs-ecg", "ECG")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);

    let r = c.post(&url).json(&json!({"app_id": "x", "control_period_ms": "fast"})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let err: Value = r.json().await.unwrap();
    assert_eq!(err["error"], "VALIDATION_ERROR");
    h.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stream_pushes_vitals_in_sim_time_order() {
    let (h, base) = session(50.0).await;
    let ws_url = format!("{}/api/stream", base.replace("http", "ws"));
    let (mut ws, _) = tokio_tungstenite::connect_async(ws_url).await.unwrap();
    let mut last = 0;
    let mut vitals = 0;
    while vitals < 5 {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.expect("event within 10 s");
        let text = msg.unwrap().unwrap().into_text().unwrap();
        let ev: Value = serde_json::from_str(&text).unwrap();
        let t = ev["sim_time_ms"].as_u64().unwrap();
        assert!(t >= last);
        last = t;
        if ev["type"] == "vitals" {
            vitals += 1;
            assert!(ev["data"]["vitals"].is_object());
        }
    }
    h.shutdown().await;
}

#[tokio::test]
async fn occupied_port_is_reported() {
    let taken = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = taken.local_addr().unwrap();
    match start(load("xray-safe"), None, addr, 1.0).await {
        Err(ServeError::PortInUse(p)) => assert_eq!(p, addr.port()),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("bound an occupied port"),
    }
    assert!(matches!(
        start(load("xray-safe"), None, SocketAddr::from(([127, 0, 0, 1], 0)), 0.0).await,
        Err(ServeError::InvalidSpeed)
    ));
}
