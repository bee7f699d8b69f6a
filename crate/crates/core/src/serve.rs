//! Live session: runs a scenario against the wall clock and exposes the
//! supervisor over HTTP and a WebSocket event stream.
//!
//! Handlers never touch the simulation directly. Reads take a short lock on
//! a snapshot-friendly view; writes are queued and applied by the tick loop
//! between ticks, which then answers the waiting handler.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{broadcast, mpsc, oneshot};

use crate::alarms::AlarmError;
use crate::apps::Directive;
use crate::bus::Credential;
use crate::scenario::ScenarioSpec;
use crate::sim::{SimError, Simulation};
use crate::supervisor::{AppManifest, AppStatus, SupervisorError};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("cannot bind: {0}")]
    Bind(std::io::Error),
    #[error("speed must be a positive number")]
    InvalidSpeed,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Failure reported to an HTTP client.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: Value::Null,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.code, "message": self.message, "details": self.details});
        (self.status, Json(body)).into_response()
    }
}

impl From<SupervisorError> for ApiError {
    fn from(e: SupervisorError) -> Self {
        let message = e.to_string();
        match e {
            SupervisorError::NotReady { report, .. } => ApiError {
                status: StatusCode::CONFLICT,
                code: "NOT_READY",
                message,
                details: serde_json::to_value(&*report).unwrap_or(Value::Null),
            },
            SupervisorError::DuplicateApp(_) => ApiError::new(StatusCode::CONFLICT, "DUPLICATE_APP", message),
            SupervisorError::UnknownApp(_) => ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_APP", message),
            SupervisorError::AuthFailed { .. } => ApiError::new(StatusCode::UNAUTHORIZED, "AUTH_FAILED", message),
            SupervisorError::InvalidManifest(_) => ApiError::new(StatusCode::BAD_REQUEST, "VALIDATION_ERROR", message),
            SupervisorError::UnknownClinician(_) => ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_CLINICIAN", message),
            SupervisorError::Alarm(AlarmError::UnknownAlarm(_)) => ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_ALARM", message),
            SupervisorError::Bus(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "BUS_ERROR", message),
        }
    }
}

type Reply<T> = oneshot::Sender<Result<T, ApiError>>;

enum Action {
    Launch {
        manifest: Box<AppManifest>,
        force: bool,
        reply: Reply<Value>,
    },
    Override {
        app_id: String,
        directive: Directive,
        credential: Credential,
        reply: Reply<Value>,
    },
    Ack {
        alarm_id: u64,
        credential: Credential,
        reply: Reply<Value>,
    },
}

#[derive(Clone)]
struct AppState {
    sim: Arc<Mutex<Simulation>>,
    actions: mpsc::Sender<Action>,
    events: broadcast::Sender<String>,
}

/// A running session.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    sim: Arc<Mutex<Simulation>>,
    task: tokio::task::JoinHandle<()>,
}

impl ServerHandle {
    /// Simulated time of the live session.
    pub fn now_ms(&self) -> u64 {
        self.sim.lock().expect("sim lock").now_ms()
    }

    pub fn with_sim<T>(&self, f: impl FnOnce(&Simulation) -> T) -> T {
        f(&self.sim.lock().expect("sim lock"))
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = self.task.await;
    }

    /// Waits until the server stops on its own.
    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

fn apply(sim: &mut Simulation, action: Action) {
    match action {
        Action::Launch { manifest, force, reply } => {
            let r = sim
                .launch_app(*manifest, force)
                .map(|s| serde_json::to_value(s).unwrap_or(Value::Null))
                .map_err(ApiError::from);
            let _ = reply.send(r);
        }
        Action::Override {
            app_id,
            directive,
            credential,
            reply,
        } => {
            let stopped = sim
                .supervisor()
                .instance(&app_id)
                .is_some_and(|i| i.status == AppStatus::Stopped);
            let r = if stopped {
                Err(ApiError::new(StatusCode::CONFLICT, "APP_NOT_RUNNING", format!("app {app_id} is stopped")))
            } else {
                sim.submit_override(&app_id, directive, &credential)
                    .map(|seq| json!({"app_id": app_id, "log_seq": seq, "accepted_at_ms": sim.now_ms()}))
                    .map_err(ApiError::from)
            };
            let _ = reply.send(r);
        }
        Action::Ack {
            alarm_id,
            credential,
            reply,
        } => {
            let r = sim
                .ack_alarm(alarm_id, &credential)
                .map(|a| json!({"alarm": a, "log_seq": sim.log().len() as u64 - 1}))
                .map_err(ApiError::from);
            let _ = reply.send(r);
        }
    }
}

fn publish_events(sim: &mut Simulation, events: &broadcast::Sender<String>) {
    for e in sim.drain_events() {
        if let Ok(text) = serde_json::to_string(&e) {
            let _ = events.send(text);
        }
    }
}

/// Binds `addr` and starts ticking at `speed` times real time.
pub async fn start(spec: ScenarioSpec, seed: Option<u64>, addr: SocketAddr, speed: f64) -> Result<ServerHandle, ServeError> {
    if !(speed.is_finite() && speed > 0.0) {
        return Err(ServeError::InvalidSpeed);
    }
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            ServeError::PortInUse(addr.port())
        } else {
            ServeError::Bind(e)
        }
    })?;
    let local = listener.local_addr().map_err(ServeError::Bind)?;
    let tick = Duration::from_secs_f64(spec.tick_ms as f64 / 1000.0 / speed);
    let sim = Arc::new(Mutex::new(Simulation::new(spec, seed)?));
    let (actions, mut rx) = mpsc::channel::<Action>(64);
    let (events, _) = broadcast::channel::<String>(4096);
    let state = AppState {
        sim: sim.clone(),
        actions,
        events: events.clone(),
    };
    let (shutdown_tx, mut shutdown_rx) = oneshot::channel::<()>();

    let ticker_sim = sim.clone();
    let ticker = async move {
        let mut interval = tokio::time::interval(tick);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = interval.tick() => {
                    let mut s = ticker_sim.lock().expect("sim lock");
                    while let Ok(a) = rx.try_recv() {
                        apply(&mut s, a);
                    }
                    if !s.is_finished() {
                        let _ = s.step();
                    }
                    publish_events(&mut s, &events);
                }
                Some(a) = rx.recv() => {
                    let mut s = ticker_sim.lock().expect("sim lock");
                    apply(&mut s, a);
                    publish_events(&mut s, &events);
                }
            }
        }
    };

    let app = router(state);
    let task = tokio::spawn(async move {
        let server = axum::serve(listener, app).with_graceful_shutdown(async move {
            let _ = (&mut shutdown_rx).await;
        });
        tokio::select! {
            _ = server => {}
            _ = ticker => {}
        }
    });
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(shutdown_tx),
        sim,
        task,
    })
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/devices", get(devices))
        .route("/api/apps", get(apps).post(launch))
        .route("/api/apps/{id}/override", post(override_app))
        .route("/api/alarms", get(alarms))
        .route("/api/alarms/{id}/ack", post(ack))
        .route("/api/patient/vitals", get(vitals))
        .route("/api/login", post(login))
        .route("/api/stream", get(stream))
        .with_state(state)
}

async fn devices(State(s): State<AppState>) -> Json<Value> {
    let sim = s.sim.lock().expect("sim lock");
    Json(json!(sim.device_views()))
}

async fn apps(State(s): State<AppState>) -> Json<Value> {
    let sim = s.sim.lock().expect("sim lock");
    Json(json!(sim.supervisor().apps()))
}

async fn alarms(State(s): State<AppState>) -> Json<Value> {
    let sim = s.sim.lock().expect("sim lock");
    let a = sim.supervisor().alarms();
    Json(json!({"active": a.surfaced(), "history": a.history()}))
}

async fn vitals(State(s): State<AppState>) -> Json<Value> {
    let sim = s.sim.lock().expect("sim lock");
    Json(json!({
        "sim_time_ms": sim.now_ms(),
        "patient_id": sim.spec().patient_record.patient_id,
        "alive": sim.patient().alive,
        "vitals": sim.vitals(),
    }))
}

#[derive(Deserialize)]
struct LoginBody {
    clinician_id: String,
}

/// Mock identity provider: hands out the credential the registry issued to a
/// clinician named in the scenario.
async fn login(State(s): State<AppState>, Json(body): Json<LoginBody>) -> Result<Json<Value>, ApiError> {
    let sim = s.sim.lock().expect("sim lock");
    sim.clinician_credential(&body.clinician_id)
        .map(|c| Json(json!(c)))
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "AUTH_FAILED", format!("unknown clinician {}", body.clinician_id)))
}

async fn submit(s: &AppState, make: impl FnOnce(Reply<Value>) -> Action) -> Result<Value, ApiError> {
    let (tx, rx) = oneshot::channel();
    s.actions
        .send(make(tx))
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "SESSION_ENDED", "simulation is not running"))?;
    rx.await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "SESSION_ENDED", "simulation is not running"))?
}

#[derive(Deserialize, Default)]
struct LaunchQuery {
    #[serde(default)]
    force: bool,
}

async fn launch(State(s): State<AppState>, Query(q): Query<LaunchQuery>, body: String) -> Result<(StatusCode, Json<Value>), ApiError> {
    let de = &mut serde_json::Deserializer::from_str(&body);
    let manifest: AppManifest = serde_path_to_error::deserialize(de).map_err(|e| {
        ApiError::new(StatusCode::BAD_REQUEST, "VALIDATION_ERROR", format!("{}: {}", e.path(), e.inner()))
    })?;
    let v = submit(&s, |reply| Action::Launch {
        manifest: Box::new(manifest),
        force: q.force,
        reply,
    })
    .await?;
    Ok((StatusCode::CREATED, Json(v)))
}

#[derive(Deserialize)]
struct OverrideBody {
    directive: Directive,
    credential: Credential,
}

async fn override_app(State(s): State<AppState>, Path(id): Path<String>, body: String) -> Result<(StatusCode, Json<Value>), ApiError> {
    let body: OverrideBody =
        serde_json::from_str(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "VALIDATION_ERROR", e.to_string()))?;
    let v = submit(&s, |reply| Action::Override {
        app_id: id,
        directive: body.directive,
        credential: body.credential,
        reply,
    })
    .await?;
    Ok((StatusCode::ACCEPTED, Json(v)))
}

#[derive(Deserialize)]
struct AckBody {
    credential: Credential,
}

async fn ack(State(s): State<AppState>, Path(id): Path<u64>, body: String) -> Result<Json<Value>, ApiError> {
    let body: AckBody =
        serde_json::from_str(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "VALIDATION_ERROR", e.to_string()))?;
    let v = submit(&s, |reply| Action::Ack {
        alarm_id: id,
        credential: body.credential,
        reply,
    })
    .await?;
    Ok(Json(v))
}

async fn stream(State(s): State<AppState>, ws: WebSocketUpgrade) -> Response {
    let rx = s.events.subscribe();
    ws.on_upgrade(move |socket| pump(socket, rx))
}

async fn pump(mut socket: WebSocket, mut rx: broadcast::Receiver<String>) {
    loop {
        match rx.recv().await {
            Ok(text) => {
                if socket.send(Message::Text(text.into())).await.is_err() {
                    return;
                }
            }
            Err(broadcast::error::RecvError::Lagged(n)) => {
                let note = json!({"type": "lagged", "sim_time_ms": null, "data": {"skipped": n}}).to_string();
                if socket.send(Message::Text(note.into())).await.is_err() {
                    return;
                }
            }
            Err(broadcast::error::RecvError::Closed) => return,
        }
    }
}
