//! App lifecycle, readiness assessment, data and time partitioning, and the
//! clinician-facing operations (overrides, alarm acknowledgement).
//!
//! Data partitioning: an app only gets readers and writers for the streams
//! and commands named in its manifest. Time partitioning: every take and
//! every command costs one bus operation, and an app that asks for more than
//! its per-period budget loses the rest of its period and is marked
//! DEGRADED. Other apps are scheduled independently and never see it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::alarms::{Acuity, Alarm, AlarmCategory, AlarmError, AlarmManager, AlarmRequest, RaiseOutcome};
use crate::apps::{AppConfig, AppContext, AppIo, ClinicalApp, ControlDecision, Directive, OverrideEntry};
use crate::bus::{
    command_topic, match_qos, Action, Bus, BusError, Credential, DeviceDescriptor, DeviceKind, ParticipantHandle, ParticipantKind,
    QosProfile, ReaderId, Sample, SampleRef, WriterId,
};
use crate::devices::Command;
use crate::logger::LogKind;
use crate::patient::PatientRecord;

pub const DEFAULT_TICK_BUDGET: u32 = 100;

/// QoS for command writers: reliable, and long-lived enough to survive one
/// device tick.
pub fn command_qos() -> QosProfile {
    QosProfile::reliable(1_000, 5_000, 16)
}

fn one() -> usize {
    1
}

fn default_budget() -> u32 {
    DEFAULT_TICK_BUDGET
}

fn default_role() -> String {
    "app".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceRequirement {
    pub device_kind: DeviceKind,
    #[serde(default = "one")]
    pub min_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicRequest {
    pub device_kind: DeviceKind,
    pub stream: String,
    pub qos: QosProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandRequest {
    pub device_kind: DeviceKind,
    pub verb: String,
    #[serde(default = "command_qos")]
    pub qos: QosProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppManifest {
    pub app_id: String,
    #[serde(default = "default_role")]
    pub role: String,
    /// Presented credential. When absent the supervisor issues one.
    #[serde(default)]
    pub credential: Option<Credential>,
    #[serde(default)]
    pub required_devices: Vec<DeviceRequirement>,
    #[serde(default)]
    pub subscribed_topics: Vec<TopicRequest>,
    #[serde(default)]
    pub command_topics: Vec<CommandRequest>,
    #[serde(default = "default_budget")]
    pub tick_budget: u32,
    pub control_period_ms: u64,
    pub app: AppConfig,
}

impl AppManifest {
    pub fn validate(&self) -> Result<(), String> {
        if self.app_id.is_empty() {
            return Err("app_id: must not be empty".into());
        }
        if self.tick_budget == 0 {
            return Err("tick_budget: must be at least 1".into());
        }
        if self.control_period_ms == 0 {
            return Err("control_period_ms: must be at least 1".into());
        }
        for (i, t) in self.subscribed_topics.iter().enumerate() {
            t.qos
                .validate()
                .map_err(|e| format!("subscribed_topics[{i}].qos: {e}"))?;
        }
        for (i, c) in self.command_topics.iter().enumerate() {
            c.qos.validate().map_err(|e| format!("command_topics[{i}].qos: {e}"))?;
        }
        Ok(())
    }
}

fn stream_of(topic: &str) -> &str {
    topic.rsplit('/').next().unwrap_or(topic)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QosMismatch {
    pub topic: String,
    pub offered: QosProfile,
    pub requested: QosProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReadinessReport {
    pub ready: bool,
    pub missing_devices: Vec<(DeviceKind, usize)>,
    pub qos_mismatches: Vec<QosMismatch>,
    pub credential_failures: Vec<String>,
    /// Manifest topics the app's role may not use.
    pub access_denied: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AppStatus {
    Launched,
    Running,
    Degraded,
    Stopped,
}

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error("app {app_id} is not ready")]
    NotReady { app_id: String, report: Box<ReadinessReport> },
    #[error("app {0} is already launched")]
    DuplicateApp(String),
    #[error("unknown app {0}")]
    UnknownApp(String),
    #[error("authentication failed for {subject}: {reason}")]
    AuthFailed { subject: String, reason: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("unknown clinician {0}")]
    UnknownClinician(String),
    #[error(transparent)]
    Alarm(#[from] AlarmError),
    #[error(transparent)]
    Bus(BusError),
}

impl From<BusError> for SupervisorError {
    fn from(e: BusError) -> Self {
        match e {
            BusError::AuthFailed { subject, reason } => SupervisorError::AuthFailed {
                subject,
                reason: reason.to_string(),
            },
            other => SupervisorError::Bus(other),
        }
    }
}

#[derive(Clone, Debug)]
struct ReaderBinding {
    kind: DeviceKind,
    stream: String,
    reader: ReaderId,
}

#[derive(Default)]
struct Endpoints {
    readers: BTreeMap<String, ReaderBinding>,
    writers: BTreeMap<String, WriterId>,
    denied: BTreeSet<String>,
}

pub struct AppInstance {
    pub manifest: AppManifest,
    pub status: AppStatus,
    pub budget_used_this_period: u32,
    pub pending_overrides: VecDeque<OverrideEntry>,
    pub period_index: u64,
    pub last_decision: Option<ControlDecision>,
    pub forced: bool,
    handle: ParticipantHandle,
    endpoints: Endpoints,
    app: Box<dyn ClinicalApp>,
    next_due_ms: u64,
    unroutable: BTreeSet<(String, String)>,
}

impl AppInstance {
    pub fn summary(&self) -> AppSummary {
        AppSummary {
            app_id: self.manifest.app_id.clone(),
            kind: self.manifest.app.kind_name().to_string(),
            status: self.status,
            period_index: self.period_index,
            budget_used_this_period: self.budget_used_this_period,
            tick_budget: self.manifest.tick_budget,
            control_period_ms: self.manifest.control_period_ms,
            pending_overrides: self.pending_overrides.len(),
            note: self.last_decision.as_ref().and_then(|d| d.note.clone()),
            forced: self.forced,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppSummary {
    pub app_id: String,
    pub kind: String,
    pub status: AppStatus,
    pub period_index: u64,
    pub budget_used_this_period: u32,
    pub tick_budget: u32,
    pub control_period_ms: u64,
    pub pending_overrides: usize,
    pub note: Option<String>,
    pub forced: bool,
}

/// Something the clinician console should hear about.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsoleEvent {
    #[serde(rename = "type")]
    pub kind: String,
    pub sim_time_ms: u64,
    pub data: Value,
}

struct Seat {
    handle: ParticipantHandle,
    writers: BTreeMap<String, WriterId>,
}

struct BusIo<'a> {
    bus: &'a mut Bus,
    endpoints: &'a Endpoints,
    devices: &'a [DeviceDescriptor],
    now_ms: u64,
}

impl AppIo for BusIo<'_> {
    fn take(&mut self, kind: DeviceKind, stream: &str) -> (Vec<Sample>, u32) {
        let mut out = Vec::new();
        let mut ops = 0;
        for b in self.endpoints.readers.values() {
            if b.kind == kind && b.stream == stream {
                ops += 1;
                if let Ok(mut s) = self.bus.take(b.reader, self.now_ms) {
                    out.append(&mut s);
                }
            }
        }
        (out, ops)
    }

    fn can_command(&self, device_id: &str, verb: &str) -> bool {
        self.endpoints.writers.contains_key(&command_topic(device_id, verb))
            && self.devices.iter().any(|d| d.device_id == device_id)
    }

    fn devices_of(&self, kind: DeviceKind) -> Vec<String> {
        self.devices
            .iter()
            .filter(|d| d.device_kind == kind)
            .map(|d| d.device_id.clone())
            .collect()
    }
}

pub struct Supervisor {
    record: PatientRecord,
    instances: BTreeMap<String, AppInstance>,
    alarms: AlarmManager,
    service: Option<ParticipantHandle>,
    alarm_writers: BTreeMap<String, Option<WriterId>>,
    seats: BTreeMap<String, Seat>,
    events: Vec<ConsoleEvent>,
}

pub const SUPERVISOR_ID: &str = "supervisor";

impl Supervisor {
    pub fn new(record: PatientRecord) -> Self {
        Self {
            record,
            instances: BTreeMap::new(),
            alarms: AlarmManager::new(),
            service: None,
            alarm_writers: BTreeMap::new(),
            seats: BTreeMap::new(),
            events: Vec::new(),
        }
    }

    /// Joins the bus as the service that publishes alarms.
    pub fn attach(&mut self, bus: &mut Bus, now_ms: u64) -> Result<(), SupervisorError> {
        let cred = bus.authority().issue(SUPERVISOR_ID, "supervisor", u64::MAX);
        let handle = bus.register_identity(
            &cred,
            ParticipantKind::Service {
                name: SUPERVISOR_ID.into(),
            },
            now_ms,
        )?;
        self.service = Some(handle);
        Ok(())
    }

    /// Seats a clinician at the console with their presented credential.
    pub fn add_clinician(&mut self, bus: &mut Bus, credential: &Credential, now_ms: u64) -> Result<(), SupervisorError> {
        let handle = bus.register_identity(
            credential,
            ParticipantKind::Console {
                clinician_id: credential.subject.clone(),
            },
            now_ms,
        )?;
        self.seats.insert(
            credential.subject.clone(),
            Seat {
                handle,
                writers: BTreeMap::new(),
            },
        );
        Ok(())
    }

    pub fn record(&self) -> &PatientRecord {
        &self.record
    }

    pub fn alarms(&self) -> &AlarmManager {
        &self.alarms
    }

    pub fn instance(&self, app_id: &str) -> Option<&AppInstance> {
        self.instances.get(app_id)
    }

    pub fn apps(&self) -> Vec<AppSummary> {
        self.instances.values().map(AppInstance::summary).collect()
    }

    pub fn drain_events(&mut self) -> Vec<ConsoleEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn push_event(&mut self, kind: &str, sim_time_ms: u64, data: Value) {
        self.events.push(ConsoleEvent {
            kind: kind.to_string(),
            sim_time_ms,
            data,
        });
    }

    /// Pure query: can this manifest run against what is on the bus now?
    pub fn readiness_check(&self, bus: &Bus, manifest: &AppManifest, now_ms: u64) -> ReadinessReport {
        let devices = bus.discover(now_ms);
        let mut missing_devices = Vec::new();
        for req in &manifest.required_devices {
            let have = devices.iter().filter(|d| d.device_kind == req.device_kind).count();
            if have < req.min_count {
                missing_devices.push((req.device_kind, req.min_count - have));
            }
        }
        let role = manifest.credential.as_ref().map_or(manifest.role.as_str(), |c| c.role.as_str());
        let mut qos_mismatches = Vec::new();
        let mut access_denied = Vec::new();
        for sub in &manifest.subscribed_topics {
            for d in devices.iter().filter(|d| d.device_kind == sub.device_kind) {
                for t in d.published_topics.iter().filter(|t| stream_of(&t.topic) == sub.stream) {
                    if !match_qos(&t.qos, &sub.qos) {
                        qos_mismatches.push(QosMismatch {
                            topic: t.topic.clone(),
                            offered: t.qos,
                            requested: sub.qos,
                        });
                    }
                    if !bus.policy().allows(role, &t.topic, Action::Subscribe) {
                        access_denied.push(t.topic.clone());
                    }
                }
            }
        }
        for cmd in &manifest.command_topics {
            for d in devices.iter().filter(|d| d.device_kind == cmd.device_kind && d.accepts(&cmd.verb)) {
                let topic = command_topic(&d.device_id, &cmd.verb);
                if !bus.policy().allows(role, &topic, Action::Command) {
                    access_denied.push(topic);
                }
            }
        }
        let mut credential_failures = Vec::new();
        if let Some(c) = &manifest.credential {
            if let Err(reason) = bus.authority().verify(c, now_ms) {
                credential_failures.push(format!("{}: {reason}", c.subject));
            }
            if c.subject != manifest.app_id {
                credential_failures.push(format!("{}: subject does not match app_id {}", c.subject, manifest.app_id));
            }
        }
        let ready = missing_devices.is_empty() && qos_mismatches.is_empty() && credential_failures.is_empty() && access_denied.is_empty();
        ReadinessReport {
            ready,
            missing_devices,
            qos_mismatches,
            credential_failures,
            access_denied,
        }
    }

    pub fn launch_app(&mut self, bus: &mut Bus, manifest: AppManifest, force: bool, now_ms: u64) -> Result<AppSummary, SupervisorError> {
        manifest.validate().map_err(SupervisorError::InvalidManifest)?;
        let app_id = manifest.app_id.clone();
        if self.instances.contains_key(&app_id) {
            return Err(SupervisorError::DuplicateApp(app_id));
        }
        let report = self.readiness_check(bus, &manifest, now_ms);
        if !report.ready {
            let event = if force { "forced_launch" } else { "launch_refused" };
            bus.log_mut().record(
                now_ms,
                SUPERVISOR_ID,
                LogKind::Lifecycle,
                json!({"event": event, "severity": "warning", "app_id": app_id, "readiness": report}),
            );
            if !force {
                return Err(SupervisorError::NotReady {
                    app_id,
                    report: Box::new(report),
                });
            }
        }
        let credential = manifest
            .credential
            .clone()
            .unwrap_or_else(|| bus.authority().issue(app_id.clone(), manifest.role.clone(), u64::MAX));
        let handle = bus.register_identity(&credential, ParticipantKind::App { app_id: app_id.clone() }, now_ms)?;
        let app = manifest.app.build(&self.record);
        let mut inst = AppInstance {
            status: AppStatus::Launched,
            budget_used_this_period: 0,
            pending_overrides: VecDeque::new(),
            period_index: 0,
            last_decision: None,
            forced: force && !report.ready,
            handle,
            endpoints: Endpoints::default(),
            app,
            next_due_ms: now_ms,
            unroutable: BTreeSet::new(),
            manifest,
        };
        let devices = bus.discover(now_ms);
        refresh_endpoints(bus, &mut inst, &devices, now_ms);
        bus.log_mut().record(
            now_ms,
            SUPERVISOR_ID,
            LogKind::Lifecycle,
            json!({"event": "app_launched", "app_id": app_id, "kind": inst.manifest.app.kind_name(), "forced": inst.forced}),
        );
        let summary = inst.summary();
        self.push_event("app_status", now_ms, serde_json::to_value(&summary).unwrap_or(Value::Null));
        self.instances.insert(app_id, inst);
        Ok(summary)
    }

    pub fn stop_app(&mut self, bus: &mut Bus, app_id: &str, now_ms: u64) -> Result<(), SupervisorError> {
        let inst = self
            .instances
            .get_mut(app_id)
            .ok_or_else(|| SupervisorError::UnknownApp(app_id.to_string()))?;
        if inst.status != AppStatus::Stopped {
            inst.status = AppStatus::Stopped;
            let _ = bus.revoke(inst.handle, now_ms);
            self.set_status_event(bus, app_id, AppStatus::Stopped, now_ms);
        }
        Ok(())
    }

    fn set_status_event(&mut self, bus: &mut Bus, app_id: &str, status: AppStatus, now_ms: u64) {
        bus.log_mut().record(
            now_ms,
            SUPERVISOR_ID,
            LogKind::Lifecycle,
            json!({"event": "app_status", "app_id": app_id, "status": status}),
        );
        if let Some(inst) = self.instances.get(app_id) {
            let summary = inst.summary();
            self.push_event("app_status", now_ms, serde_json::to_value(&summary).unwrap_or(Value::Null));
        }
    }

    fn authorize_clinician(&mut self, bus: &mut Bus, credential: &Credential, now_ms: u64) -> Result<(), SupervisorError> {
        bus.authenticate(credential, now_ms)?;
        if credential.role != "clinician" {
            bus.log_mut().record(
                now_ms,
                &credential.subject,
                LogKind::Security,
                json!({"event": "auth_failed", "reason": "role may not direct apps", "role": credential.role}),
            );
            return Err(SupervisorError::AuthFailed {
                subject: credential.subject.clone(),
                reason: format!("role {} is not clinician", credential.role),
            });
        }
        Ok(())
    }

    /// Queues a clinician directive for the app's next period. Returns the
    /// log seq of the OVERRIDE record.
    pub fn submit_override(&mut self, bus: &mut Bus, app_id: &str, directive: Directive, credential: &Credential, now_ms: u64) -> Result<u64, SupervisorError> {
        if !self.instances.contains_key(app_id) {
            return Err(SupervisorError::UnknownApp(app_id.to_string()));
        }
        self.authorize_clinician(bus, credential, now_ms)?;
        let seq = bus.log_mut().record(
            now_ms,
            &credential.subject,
            LogKind::Override,
            json!({"event": "submitted", "app_id": app_id, "clinician": credential.subject, "directive": directive}),
        );
        let entry = OverrideEntry {
            seq,
            clinician: credential.subject.clone(),
            directive,
        };
        self.push_event("override", now_ms, json!({"app_id": app_id, "override": entry}));
        self.instances
            .get_mut(app_id)
            .expect("checked above")
            .pending_overrides
            .push_back(entry);
        Ok(seq)
    }

    pub fn ack_alarm(&mut self, bus: &mut Bus, alarm_id: u64, credential: &Credential, now_ms: u64) -> Result<Alarm, SupervisorError> {
        self.authorize_clinician(bus, credential, now_ms)?;
        self.ack_as(bus, alarm_id, &credential.subject, now_ms)
    }

    fn ack_as(&mut self, bus: &mut Bus, alarm_id: u64, clinician: &str, now_ms: u64) -> Result<Alarm, SupervisorError> {
        let alarm = self.alarms.ack(alarm_id, clinician, now_ms)?.clone();
        bus.log_mut().record(
            now_ms,
            clinician,
            LogKind::Alarm,
            json!({"event": "acknowledged", "alarm_id": alarm_id, "acuity": alarm.acuity, "cause": alarm.cause, "clinician": clinician}),
        );
        self.push_event("alarm", now_ms, json!({"event": "acknowledged", "alarm": alarm}));
        Ok(alarm)
    }

    /// Sends a command from a seated clinician's console.
    pub fn console_command(
        &mut self,
        bus: &mut Bus,
        clinician: &str,
        device_id: &str,
        command: &Command,
        override_seq: Option<u64>,
        now_ms: u64,
    ) -> Result<(), SupervisorError> {
        let seat = self
            .seats
            .get_mut(clinician)
            .ok_or_else(|| SupervisorError::UnknownClinician(clinician.to_string()))?;
        let topic = command_topic(device_id, &command.verb);
        let writer = match seat.writers.get(&topic) {
            Some(w) => *w,
            None => {
                let w = bus.create_writer(seat.handle, &topic, command_qos(), now_ms)?;
                seat.writers.insert(topic.clone(), w);
                w
            }
        };
        bus.log_mut().record(
            now_ms,
            clinician,
            LogKind::Command,
            command_record(clinician, device_id, command, &[], override_seq, None),
        );
        bus.publish(writer, command.to_payload(), now_ms)?;
        self.push_event(
            "command",
            now_ms,
            json!({"issuer": clinician, "device": device_id, "command": command, "override_seq": override_seq}),
        );
        Ok(())
    }

    pub fn raise_alarm(&mut self, bus: &mut Bus, source: &str, req: AlarmRequest, now_ms: u64) -> RaiseOutcome {
        let outcome = self.alarms.raise(source, req, now_ms);
        let id = outcome.alarm_id();
        let alarm = self.alarms.get(id).expect("just raised").clone();
        let event = match outcome {
            RaiseOutcome::Raised(_) => "raised",
            RaiseOutcome::Coalesced(_) => "coalesced",
            RaiseOutcome::Suppressed(_) => "suppressed",
        };
        bus.log_mut().record(
            now_ms,
            source,
            LogKind::Alarm,
            json!({
                "event": event,
                "alarm_id": id,
                "acuity": alarm.acuity,
                "category": alarm.category,
                "cause": alarm.cause,
                "detail": alarm.detail,
                "evidence": alarm.evidence,
                "count": alarm.count,
                "suppressed": alarm.suppressed,
            }),
        );
        if let RaiseOutcome::Raised(_) = outcome {
            self.publish_alarm(bus, source, &alarm, now_ms);
            self.push_event("alarm", now_ms, json!({"event": "raised", "alarm": alarm}));
        }
        outcome
    }

    fn publish_alarm(&mut self, bus: &mut Bus, source: &str, alarm: &Alarm, now_ms: u64) {
        let Some(service) = self.service else {
            return;
        };
        let writer = *self.alarm_writers.entry(source.to_string()).or_insert_with(|| {
            bus.create_writer(service, &format!("alarm/{source}"), QosProfile::reliable(1_000, 60_000, 64), now_ms)
                .ok()
        });
        if let Some(w) = writer {
            let category = match alarm.category {
                AlarmCategory::Physiologic => 0.0,
                AlarmCategory::Technical => 1.0,
            };
            let payload = crate::bus::payload_of([
                ("alarm_id", alarm.alarm_id as f64, ""),
                ("acuity", alarm.acuity.code(), ""),
                ("category", category, ""),
            ]);
            let _ = bus.publish(w, payload, now_ms);
        }
    }

    /// Runs every app whose period has come due, in app_id order.
    pub fn schedule_period(&mut self, bus: &mut Bus, now_ms: u64) -> Vec<ControlDecision> {
        let ids: Vec<String> = self.instances.keys().cloned().collect();
        let mut decisions = Vec::new();
        let mut devices: Option<Vec<DeviceDescriptor>> = None;
        for app_id in ids {
            let inst = &self.instances[&app_id];
            if inst.status == AppStatus::Stopped || now_ms < inst.next_due_ms {
                continue;
            }
            let devices = devices.get_or_insert_with(|| bus.discover(now_ms));

            // Directives the supervisor carries out itself.
            let overrides: Vec<OverrideEntry> = self
                .instances
                .get_mut(&app_id)
                .expect("listed")
                .pending_overrides
                .drain(..)
                .collect();
            let mut for_app = Vec::new();
            for o in overrides {
                match o.directive {
                    Directive::AcknowledgeAlarm { alarm_id } => {
                        if let Err(e) = self.ack_as(bus, alarm_id, &o.clinician, now_ms) {
                            log_failure(bus, &app_id, &e.to_string(), now_ms);
                        }
                    }
                    Directive::UnlockPca => {
                        let pumps: Vec<String> = devices
                            .iter()
                            .filter(|d| d.device_kind == DeviceKind::PcaPump)
                            .map(|d| d.device_id.clone())
                            .collect();
                        for pump in pumps {
                            if let Err(e) = self.console_command(bus, &o.clinician, &pump, &Command::new("unlock"), Some(o.seq), now_ms) {
                                log_failure(bus, &app_id, &e.to_string(), now_ms);
                            }
                        }
                    }
                    _ => for_app.push(o),
                }
            }

            let inst = self.instances.get_mut(&app_id).expect("listed");
            refresh_endpoints(bus, inst, devices, now_ms);
            let period_index = inst.period_index;
            let (decision, failures, exhausted, used) = {
                let mut io = BusIo {
                    bus: &mut *bus,
                    endpoints: &inst.endpoints,
                    devices,
                    now_ms,
                };
                let mut ctx = AppContext::new(
                    &app_id,
                    period_index,
                    now_ms,
                    inst.manifest.control_period_ms,
                    inst.manifest.tick_budget,
                    for_app,
                    &mut io,
                );
                let _ = inst.app.step(&mut ctx);
                let exhausted = ctx.exhausted();
                let used = ctx.budget_used();
                let (d, f) = ctx.into_decision();
                (d, f, exhausted, used)
            };
            inst.period_index += 1;
            inst.budget_used_this_period = used;
            while inst.next_due_ms <= now_ms {
                inst.next_due_ms += inst.manifest.control_period_ms;
            }

            for f in failures {
                if let crate::apps::AppError::NoRoute { device, verb } = &f {
                    if inst.unroutable.insert((device.clone(), verb.clone())) {
                        log_failure(bus, &app_id, &f.to_string(), now_ms);
                    }
                }
            }
            for c in &decision.commands {
                let topic = command_topic(&c.device_id, &c.command.verb);
                let Some(&writer) = inst.endpoints.writers.get(&topic) else {
                    continue;
                };
                bus.log_mut().record(
                    now_ms,
                    &app_id,
                    LogKind::Command,
                    command_record(&app_id, &c.device_id, &c.command, &c.cites, c.override_seq, Some(period_index)),
                );
                let _ = bus.publish(writer, c.command.to_payload(), now_ms);
            }
            let previous = inst.status;
            let next = if exhausted { AppStatus::Degraded } else { AppStatus::Running };
            inst.status = next;
            inst.last_decision = Some(decision.clone());

            for c in &decision.commands {
                self.push_event(
                    "command",
                    now_ms,
                    json!({"issuer": app_id, "device": c.device_id, "command": c.command, "cites": c.cites, "override_seq": c.override_seq}),
                );
            }
            self.alarms.set_suppression(&app_id, decision.suppression.clone());
            for req in decision.alarms.clone() {
                self.raise_alarm(bus, &app_id, req, now_ms);
            }
            if exhausted {
                bus.log_mut().record(
                    now_ms,
                    SUPERVISOR_ID,
                    LogKind::Lifecycle,
                    json!({"event": "budget_exceeded", "severity": "warning", "app_id": app_id, "budget": used}),
                );
                self.raise_alarm(
                    bus,
                    SUPERVISOR_ID,
                    AlarmRequest::new(
                        Acuity::Warning,
                        AlarmCategory::Technical,
                        format!("app.budget_exceeded.{app_id}"),
                        format!("{app_id} exceeded its budget of {used} bus operations; outputs discarded"),
                    ),
                    now_ms,
                );
            }
            if previous != next {
                self.set_status_event(bus, &app_id, next, now_ms);
            }
            decisions.push(decision);
        }
        decisions
    }
}

fn log_failure(bus: &mut Bus, app_id: &str, what: &str, now_ms: u64) {
    bus.log_mut().record(
        now_ms,
        SUPERVISOR_ID,
        LogKind::Lifecycle,
        json!({"event": "app_error", "severity": "warning", "app_id": app_id, "error": what}),
    );
}

/// Payload of a COMMAND "issued" record.
pub fn command_record(issuer: &str, device_id: &str, command: &Command, cites: &[SampleRef], override_seq: Option<u64>, period: Option<u64>) -> Value {
    let mut v = json!({
        "event": "issued",
        "issuer": issuer,
        "device": device_id,
        "verb": command.verb,
        "cites": cites,
    });
    if let Some(a) = command.arg {
        v["arg"] = json!(a);
    }
    if let Some(d) = command.duration_ms {
        v["duration_ms"] = json!(d);
    }
    if let Some(s) = override_seq {
        v["override_seq"] = json!(s);
    }
    if let Some(p) = period {
        v["period"] = json!(p);
    }
    v
}

/// Creates readers and writers for manifest topics offered by devices that
/// have appeared since the last call. Denials are logged once by the bus and
/// remembered so they are not retried.
fn refresh_endpoints(bus: &mut Bus, inst: &mut AppInstance, devices: &[DeviceDescriptor], now_ms: u64) {
    let handle = inst.handle;
    for sub in &inst.manifest.subscribed_topics {
        for d in devices.iter().filter(|d| d.device_kind == sub.device_kind) {
            for t in d.published_topics.iter().filter(|t| stream_of(&t.topic) == sub.stream) {
                if inst.endpoints.readers.contains_key(&t.topic) || inst.endpoints.denied.contains(&t.topic) {
                    continue;
                }
                match bus.create_reader(handle, &t.topic, sub.qos, now_ms) {
                    Ok(reader) => {
                        inst.endpoints.readers.insert(
                            t.topic.clone(),
                            ReaderBinding {
                                kind: sub.device_kind,
                                stream: sub.stream.clone(),
                                reader,
                            },
                        );
                    }
                    Err(_) => {
                        inst.endpoints.denied.insert(t.topic.clone());
                    }
                }
            }
        }
    }
    for cmd in &inst.manifest.command_topics {
        for d in devices.iter().filter(|d| d.device_kind == cmd.device_kind && d.accepts(&cmd.verb)) {
            let topic = command_topic(&d.device_id, &cmd.verb);
            if inst.endpoints.writers.contains_key(&topic) || inst.endpoints.denied.contains(&topic) {
                continue;
            }
            match bus.create_writer(handle, &topic, cmd.qos, now_ms) {
                Ok(w) => {
                    inst.endpoints.writers.insert(topic, w);
                }
                Err(_) => {
                    inst.endpoints.denied.insert(topic);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::{BusyLoopConfig, PcaConfig};
    use crate::bus::{device_topic, AccessPolicy, AccessRule, BusConfig, CredentialAuthority, PublishedTopic};
    use crate::logger::LogKind;

    fn policy() -> AccessPolicy {
        AccessPolicy::new(vec![
            AccessRule::allow("device", "device/*", Action::Publish),
            AccessRule::allow("device", "cmd/*", Action::Subscribe),
            AccessRule::allow("app", "device/*", Action::Subscribe),
            AccessRule::allow("app", "cmd/*", Action::Command),
            AccessRule::allow("clinician", "cmd/*", Action::Command),
            AccessRule::allow("supervisor", "alarm/*", Action::Publish),
        ])
    }

    fn bus() -> Bus {
        Bus::new(BusConfig::default(), CredentialAuthority::new(b"k".to_vec()), policy())
    }

    fn device(bus: &mut Bus, kind: DeviceKind, id: &str, streams: &[(&str, u64)], verbs: &[&str]) -> Vec<WriterId> {
        let mut d = DeviceDescriptor {
            device_id: id.into(),
            device_kind: kind,
            published_topics: streams
                .iter()
                .map(|(s, p)| PublishedTopic {
                    topic: device_topic(kind, id, s),
                    qos: QosProfile::reliable(*p, 10 * p, 8),
                    nominal_rate_ms: *p,
                })
                .collect(),
            accepted_commands: verbs.iter().map(|v| v.to_string()).collect(),
            role: "device".into(),
            credential: Credential::unsigned(id, "device", u64::MAX),
        };
        bus.authority().clone().sign_descriptor(&mut d);
        let h = bus.register_participant(&d, 0).unwrap();
        d.published_topics
            .iter()
            .map(|t| bus.create_writer(h, &t.topic, t.qos, 0).unwrap())
            .collect()
    }

    fn pca_manifest() -> AppManifest {
        AppManifest {
            app_id: "pca-interlock".into(),
            role: "app".into(),
            credential: None,
            required_devices: vec![
                DeviceRequirement {
                    device_kind: DeviceKind::PulseOx,
                    min_count: 1,
                },
                DeviceRequirement {
                    device_kind: DeviceKind::PcaPump,
                    min_count: 1,
                },
            ],
            subscribed_topics: vec![
                TopicRequest {
                    device_kind: DeviceKind::PulseOx,
                    stream: "spo2".into(),
                    qos: QosProfile::best_effort(1_000, 10_000, 8),
                },
                TopicRequest {
                    device_kind: DeviceKind::Capnometer,
                    stream: "etco2".into(),
                    qos: QosProfile::best_effort(1_000, 10_000, 8),
                },
            ],
            command_topics: vec![CommandRequest {
                device_kind: DeviceKind::PcaPump,
                verb: "lockout".into(),
                qos: command_qos(),
            }],
            tick_budget: 100,
            control_period_ms: 1_000,
            app: AppConfig::PcaInterlock(PcaConfig::default()),
        }
    }

    fn busy_manifest() -> AppManifest {
        AppManifest {
            app_id: "busy".into(),
            required_devices: vec![],
            subscribed_topics: vec![TopicRequest {
                device_kind: DeviceKind::PulseOx,
                stream: "spo2".into(),
                qos: QosProfile::best_effort(1_000, 10_000, 8),
            }],
            command_topics: vec![],
            app: AppConfig::BusyLoop(BusyLoopConfig::default()),
            ..pca_manifest()
        }
    }

    #[test]
    fn readiness_reports_missing_pulse_ox() {
        let mut b = bus();
        device(&mut b, DeviceKind::PcaPump, "pca-1", &[("status", 1000)], &["bolus", "lockout", "unlock"]);
        let s = Supervisor::new(PatientRecord::default());
        let r = s.readiness_check(&b, &pca_manifest(), 0);
        assert!(!r.ready);
        assert_eq!(r.missing_devices, vec![(DeviceKind::PulseOx, 1)]);
    }

    #[test]
    fn readiness_reports_qos_mismatch() {
        let mut b = bus();
        device(&mut b, DeviceKind::PcaPump, "pca-1", &[("status", 1000)], &["lockout"]);
        device(&mut b, DeviceKind::PulseOx, "po-1", &[("spo2", 1000)], &[]);
        device(&mut b, DeviceKind::Capnometer, "cap-1", &[("etco2", 2000)], &[]);
        let s = Supervisor::new(PatientRecord::default());
        let r = s.readiness_check(&b, &pca_manifest(), 0);
        assert!(!r.ready);
        assert_eq!(r.qos_mismatches.len(), 1);
        assert_eq!(r.qos_mismatches[0].topic, "device/capnometer/cap-1/etco2");
    }

    #[test]
    fn launch_lifecycle() {
        let mut b = bus();
        device(&mut b, DeviceKind::PcaPump, "pca-1", &[("status", 1000)], &["lockout"]);
        device(&mut b, DeviceKind::PulseOx, "po-1", &[("spo2", 1000)], &[]);
        let mut s = Supervisor::new(PatientRecord::default());
        let summary = s.launch_app(&mut b, pca_manifest(), false, 0).unwrap();
        assert_eq!(summary.status, AppStatus::Launched);
        assert!(matches!(
            s.launch_app(&mut b, pca_manifest(), false, 0),
            Err(SupervisorError::DuplicateApp(_))
        ));
        s.schedule_period(&mut b, 0);
        assert_eq!(s.instance("pca-interlock").unwrap().status, AppStatus::Running);
    }

    #[test]
    fn not_ready_is_refused_and_logged_unless_forced() {
        let mut b = bus();
        let mut s = Supervisor::new(PatientRecord::default());
        let err = s.launch_app(&mut b, pca_manifest(), false, 0).unwrap_err();
        assert!(matches!(err, SupervisorError::NotReady { .. }));
        let warned = b
            .log()
            .records()
            .iter()
            .filter(|r| r.event() == Some("launch_refused") && r.payload["severity"] == "warning")
            .count();
        assert_eq!(warned, 1);
        let summary = s.launch_app(&mut b, pca_manifest(), true, 0).unwrap();
        assert!(summary.forced);
    }

    #[test]
    fn busy_app_degrades_alone_and_recovers() {
        let mut b = bus();
        device(&mut b, DeviceKind::PcaPump, "pca-1", &[("status", 1000)], &["lockout"]);
        let po = device(&mut b, DeviceKind::PulseOx, "po-1", &[("spo2", 1000)], &[]);
        let mut s = Supervisor::new(PatientRecord::default());
        s.attach(&mut b, 0).unwrap();
        s.launch_app(&mut b, pca_manifest(), true, 0).unwrap();
        s.launch_app(&mut b, busy_manifest(), false, 0).unwrap();
        b.publish(po[0], crate::bus::payload_of([("spo2", 97.0, "%")]), 0).unwrap();
        let decisions = s.schedule_period(&mut b, 0);
        assert_eq!(s.instance("busy").unwrap().status, AppStatus::Degraded);
        assert_eq!(s.instance("busy").unwrap().budget_used_this_period, 100);
        // capnography never arrived, so the interlock fails safe this period
        // regardless of its noisy neighbour
        let pca = decisions.iter().find(|d| d.app_id == "pca-interlock").unwrap();
        assert!(pca.commands.is_empty());
        assert_eq!(s.instance("pca-interlock").unwrap().status, AppStatus::Running);
        assert!(s
            .alarms()
            .history()
            .iter()
            .any(|a| a.category == AlarmCategory::Technical && a.source_app == SUPERVISOR_ID));
    }

    #[test]
    fn override_requires_clinician_role() {
        let mut b = bus();
        device(&mut b, DeviceKind::PcaPump, "pca-1", &[("status", 1000)], &["lockout", "unlock"]);
        device(&mut b, DeviceKind::PulseOx, "po-1", &[("spo2", 1000)], &[]);
        let mut s = Supervisor::new(PatientRecord::default());
        s.launch_app(&mut b, pca_manifest(), false, 0).unwrap();
        let visitor = b.authority().issue("guest", "visitor", u64::MAX);
        let before = b.log().len();
        let err = s.submit_override(&mut b, "pca-interlock", Directive::UnlockPca, &visitor, 10).unwrap_err();
        assert!(matches!(err, SupervisorError::AuthFailed { .. }));
        let security: Vec<_> = b.log().records()[before..].iter().filter(|r| r.kind == LogKind::Security).collect();
        assert_eq!(security.len(), 1);
        assert!(matches!(
            s.submit_override(&mut b, "nope", Directive::UnlockPca, &visitor, 10),
            Err(SupervisorError::UnknownApp(_))
        ));
    }

    #[test]
    fn unlock_override_is_sent_from_the_console_after_it_is_logged() {
        let mut b = bus();
        device(&mut b, DeviceKind::PcaPump, "pca-1", &[("status", 1000)], &["lockout", "unlock"]);
        device(&mut b, DeviceKind::PulseOx, "po-1", &[("spo2", 1000)], &[]);
        let mut s = Supervisor::new(PatientRecord::default());
        let nurse = b.authority().issue("rn-ortiz", "clinician", u64::MAX);
        s.add_clinician(&mut b, &nurse, 0).unwrap();
        s.launch_app(&mut b, pca_manifest(), true, 0).unwrap();
        let seq = s.submit_override(&mut b, "pca-interlock", Directive::UnlockPca, &nurse, 500).unwrap();
        s.schedule_period(&mut b, 1_000);
        let cmd = b
            .log()
            .records()
            .iter()
            .find(|r| r.kind == LogKind::Command && r.payload["verb"] == "unlock")
            .unwrap();
        assert_eq!(cmd.actor, "rn-ortiz");
        assert_eq!(cmd.payload["override_seq"], seq);
        assert!(cmd.seq > seq);
    }

    #[test]
    fn denied_topic_logs_once() {
        let mut b = bus();
        device(&mut b, DeviceKind::PulseOx, "po-1", &[("spo2", 1000)], &[]);
        let mut s = Supervisor::new(PatientRecord::default());
        let m = AppManifest {
            role: "observer".into(),
            ..busy_manifest()
        };
        s.launch_app(&mut b, m, true, 0).unwrap();
        for t in 0..5 {
            s.schedule_period(&mut b, t * 1000);
        }
        let denied = b
            .log()
            .records()
            .iter()
            .filter(|r| r.kind == LogKind::Security && r.event() == Some("access_denied"))
            .count();
        assert_eq!(denied, 1);
    }
}
