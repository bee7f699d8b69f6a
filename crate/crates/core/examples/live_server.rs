//! Starts the supervisor's HTTP/WebSocket API on a random port, runs the
//! PCA scenario at 120x, polls a few endpoints and shuts down.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use ice_core::scenario::ScenarioSpec;
use ice_core::serve::start;
use serde_json::{json, Value};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/pca-safe.json");
    let server = start(ScenarioSpec::load(&path)?, Some(3), SocketAddr::from(([127, 0, 0, 1], 0)), 120.0).await?;
    let base = format!("http://{}", server.addr);
    println!("serving on {base}");
    let http = reqwest::Client::new();

    for _ in 0..3 {
        tokio::time::sleep(Duration::from_millis(500)).await;
        let v: Value = http.get(format!("{base}/api/patient/vitals")).send().await?.json().await?;
        let shown: Vec<String> = v["vitals"]
            .as_object()
            .into_iter()
            .flatten()
            .map(|(k, m)| format!("{k}={:.1}", m["value"].as_f64().unwrap_or(f64::NAN)))
            .collect();
        println!("t={:>6} ms {}", v["sim_time_ms"], shown.join(" "));
    }

    let apps: Value = http.get(format!("{base}/api/apps")).send().await?.json().await?;
    for a in apps.as_array().into_iter().flatten() {
        println!("app {} {}", a["app_id"], a["status"]);
    }

    let credential: Value = http
        .post(format!("{base}/api/login"))
        .json(&json!({"clinician_id": "dr-lee"}))
        .send()
        .await?
        .json()
        .await?;
    let resp = http
        .post(format!("{base}/api/apps/pca-interlock/override"))
        .json(&json!({"directive": {"directive": "hold_automation"}, "credential": credential}))
        .send()
        .await?;
    println!("override: {} {}", resp.status(), resp.text().await?);

    let alarms: Value = http.get(format!("{base}/api/alarms")).send().await?.json().await?;
    println!("active alarms: {}", alarms["active"].as_array().map_or(0, Vec::len));

    server.shutdown().await;
    Ok(())
}
