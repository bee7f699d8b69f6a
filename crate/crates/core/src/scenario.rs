//! Scenario files: what is plugged into the patient, which apps run, and a
//! time-ordered script of things that happen at the bedside.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apps::Directive;
use crate::bus::{device_topic, AccessPolicy, AccessRule, Action, DeviceKind, QosProfile};
use crate::devices::{DeviceSetup, FaultKind, XRAY_EXPOSURE_MS};
use crate::patient::{NoiseSigmas, PatientRecord, PlantParams};
use crate::supervisor::AppManifest;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TICK_MS: u64 = 1_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Validation { path: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ScenarioError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError::Validation {
            path: path.into(),
            message: message.into(),
        }
    }
}

fn default_tick() -> u64 {
    DEFAULT_TICK_MS
}

fn default_device_role() -> String {
    "device".into()
}

fn default_registry_key() -> String {
    "ice-registry".into()
}

fn default_beacon() -> u64 {
    100
}

/// Roles used by the shipped scenarios.
pub fn default_policy() -> AccessPolicy {
    AccessPolicy::new(vec![
        AccessRule::allow("device", "device/*", Action::Publish),
        AccessRule::allow("device", "cmd/*", Action::Subscribe),
        AccessRule::allow("app", "device/*", Action::Subscribe),
        AccessRule::allow("app", "cmd/*", Action::Command),
        AccessRule::allow("clinician", "cmd/*", Action::Command),
        AccessRule::allow("clinician", "device/*", Action::Subscribe),
        AccessRule::allow("clinician", "alarm/*", Action::Subscribe),
        AccessRule::allow("supervisor", "alarm/*", Action::Publish),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamTemplate {
    pub stream: String,
    pub period_ms: u64,
    /// Offered QoS. Defaults to reliable with deadline = period.
    #[serde(default)]
    pub qos: Option<QosProfile>,
}

impl StreamTemplate {
    pub fn offered_qos(&self) -> QosProfile {
        self.qos
            .unwrap_or_else(|| QosProfile::reliable(self.period_ms.max(1), (3 * self.period_ms).max(5_000), 8))
    }
}

/// A device as written in a scenario; expanded to a descriptor at load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceTemplate {
    pub device_id: String,
    pub device_kind: DeviceKind,
    /// Published streams. Empty means the usual set for the kind.
    #[serde(default)]
    pub streams: Vec<StreamTemplate>,
    /// Accepted command verbs. Absent means the usual set for the kind.
    #[serde(default)]
    pub commands: Option<Vec<String>>,
    #[serde(default = "default_device_role")]
    pub role: String,
    #[serde(default)]
    pub setup: DeviceSetup,
    /// Sign the credential with the wrong key, as a counterfeit device would.
    #[serde(default)]
    pub forged_credential: bool,
    /// Join the bus later than t=0.
    #[serde(default)]
    pub connect_ms: u64,
}

pub fn default_streams(kind: DeviceKind) -> Vec<StreamTemplate> {
    let s = |stream: &str, period_ms: u64| StreamTemplate {
        stream: stream.into(),
        period_ms,
        qos: None,
    };
    match kind {
        DeviceKind::InfusionPump | DeviceKind::PcaPump | DeviceKind::Ventilator | DeviceKind::CpbMachine => {
            vec![s("status", 1_000)]
        }
        DeviceKind::Xray => vec![s("status", 1_000), s("request", 1_000)],
        DeviceKind::Glucometer => vec![s("glucose", 60_000)],
        DeviceKind::PulseOx => vec![s("spo2", 1_000)],
        DeviceKind::Capnometer => vec![s("etco2", 1_000)],
        DeviceKind::Ecg => vec![s("hr", 1_000)],
        DeviceKind::Nibp => vec![s("bp", 60_000)],
    }
}

pub fn default_commands(kind: DeviceKind) -> Vec<String> {
    let v: &[&str] = match kind {
        DeviceKind::InfusionPump => &["start", "stop", "set_rate", "bolus"],
        DeviceKind::PcaPump => &["bolus", "lockout", "unlock"],
        DeviceKind::Ventilator => &["pause", "resume"],
        DeviceKind::Xray => &["expose"],
        DeviceKind::CpbMachine => &["refuse_wean"],
        _ => &[],
    };
    v.iter().map(|s| s.to_string()).collect()
}

impl DeviceTemplate {
    pub fn streams(&self) -> Vec<StreamTemplate> {
        if self.streams.is_empty() {
            default_streams(self.device_kind)
        } else {
            self.streams.clone()
        }
    }

    pub fn commands(&self) -> Vec<String> {
        self.commands.clone().unwrap_or_else(|| default_commands(self.device_kind))
    }

    pub fn topic(&self, stream: &str) -> String {
        device_topic(self.device_kind, &self.device_id, stream)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppEntry {
    pub manifest: AppManifest,
    #[serde(default)]
    pub launch_ms: u64,
    /// Launch even when the readiness check fails.
    #[serde(default)]
    pub force: bool,
}

fn default_clinician_role() -> String {
    "clinician".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicianSpec {
    pub id: String,
    #[serde(default = "default_clinician_role")]
    pub role: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpbPhase {
    OnBypass,
    Wean,
}

fn default_exposure() -> u64 {
    XRAY_EXPOSURE_MS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptEvent {
    /// A clinician operates a device through their console.
    Command {
        issuer: String,
        device: String,
        verb: String,
        #[serde(default)]
        arg: Option<f64>,
        #[serde(default)]
        duration_ms: Option<u64>,
    },
    Fault {
        device: String,
        kind: FaultKind,
        duration_ms: u64,
    },
    /// The patient presses the PCA demand button, optionally repeatedly.
    PcaButton {
        device: String,
        #[serde(default)]
        every_ms: Option<u64>,
        #[serde(default)]
        until_ms: Option<u64>,
    },
    XrayRequest {
        device: String,
        #[serde(default = "default_exposure")]
        exposure_ms: u64,
    },
    CpbPhase { device: String, phase: CpbPhase },
    Override {
        app: String,
        clinician: String,
        directive: Directive,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub time_ms: u64,
    #[serde(flatten)]
    pub event: ScriptEvent,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialState {
    /// mg/dl; defaults to the plant's basal glucose.
    pub glucose: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusSettings {
    pub beacon_interval_ms: u64,
    pub drop_probability: f64,
}

impl Default for BusSettings {
    fn default() -> Self {
        Self {
            beacon_interval_ms: default_beacon(),
            drop_probability: 0.0,
        }
    }
}

/// Predicates a run of the scenario is expected to satisfy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expectations {
    pub fatality: Option<bool>,
    pub glucose_min_at_most: Option<f64>,
    pub glucose_min_at_least: Option<f64>,
    pub glucose_rebound_at_least: Option<f64>,
    pub time_in_range_at_least: Option<f64>,
    pub max_pause_ms_at_most: Option<u64>,
    pub lockout_events_at_least: Option<u64>,
    pub lockout_events_at_most: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tick")]
    pub tick_ms: u64,
    pub duration_ms: u64,
    #[serde(default)]
    pub patient_record: PatientRecord,
    #[serde(default)]
    pub plant: PlantParams,
    #[serde(default)]
    pub noise: NoiseSigmas,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default)]
    pub bus: BusSettings,
    #[serde(default = "default_registry_key")]
    pub registry_key: String,
    pub devices: Vec<DeviceTemplate>,
    #[serde(default)]
    pub apps: Vec<AppEntry>,
    #[serde(default)]
    pub clinicians: Vec<ClinicianSpec>,
    #[serde(default)]
    pub event_script: Vec<ScriptEntry>,
    #[serde(default = "default_policy")]
    pub policy: AccessPolicy,
    /// Settling time excluded from the time-in-range figure.
    #[serde(default)]
    pub settle_ms: u64,
    #[serde(default)]
    pub expect: Expectations,
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: ScenarioSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ScenarioError::at(if path == "." { "$".into() } else { path }, e.into_inner().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario encodes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::at(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.name.is_empty() {
            return Err(ScenarioError::at("name", "must not be empty"));
        }
        if !(crate::patient::MIN_DT_MS..=crate::patient::MAX_DT_MS).contains(&self.tick_ms) {
            return Err(ScenarioError::at("tick_ms", "must be between 100 and 60000"));
        }
        if self.duration_ms == 0 {
            return Err(ScenarioError::at("duration_ms", "must be positive"));
        }
        self.patient_record
            .validate()
            .map_err(|e| ScenarioError::at("patient_record", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.bus.drop_probability) {
            return Err(ScenarioError::at("bus.drop_probability", "must be within [0, 1]"));
        }
        if self.bus.beacon_interval_ms == 0 {
            return Err(ScenarioError::at("bus.beacon_interval_ms", "must be positive"));
        }

        let mut ids = BTreeSet::new();
        for (i, d) in self.devices.iter().enumerate() {
            if d.device_id.is_empty() || d.device_id.contains('/') {
                return Err(ScenarioError::at(format!("devices[{i}].device_id"), "must be non-empty without '/'"));
            }
            if !ids.insert(d.device_id.clone()) {
                return Err(ScenarioError::at(format!("devices[{i}].device_id"), format!("duplicate device {}", d.device_id)));
            }
            for (j, s) in d.streams.iter().enumerate() {
                if s.period_ms == 0 {
                    return Err(ScenarioError::at(format!("devices[{i}].streams[{j}].period_ms"), "must be positive"));
                }
                if let Err(e) = s.offered_qos().validate() {
                    return Err(ScenarioError::at(format!("devices[{i}].streams[{j}].qos"), e.to_string()));
                }
            }
            if d.device_kind.is_monitor() && d.streams().is_empty() {
                return Err(ScenarioError::at(format!("devices[{i}].streams"), "a monitor must publish something"));
            }
        }
        let kind_of: BTreeMap<&str, DeviceKind> = self
            .devices
            .iter()
            .map(|d| (d.device_id.as_str(), d.device_kind))
            .collect();

        let mut app_ids = BTreeSet::new();
        for (i, a) in self.apps.iter().enumerate() {
            a.manifest
                .validate()
                .map_err(|m| ScenarioError::at(format!("apps[{i}].manifest"), m))?;
            if !app_ids.insert(a.manifest.app_id.clone()) {
                return Err(ScenarioError::at(format!("apps[{i}].manifest.app_id"), "duplicate app"));
            }
            if a.launch_ms > self.duration_ms {
                return Err(ScenarioError::at(format!("apps[{i}].launch_ms"), "after the end of the run"));
            }
        }
        let clinicians: BTreeSet<&str> = self.clinicians.iter().map(|c| c.id.as_str()).collect();
        if clinicians.len() != self.clinicians.len() {
            return Err(ScenarioError::at("clinicians", "duplicate clinician id"));
        }

        let mut last = 0;
        let mut faults: BTreeMap<&str, Vec<(u64, u64)>> = BTreeMap::new();
        for (i, e) in self.event_script.iter().enumerate() {
            let path = |field: &str| format!("event_script[{i}].{field}");
            if e.time_ms < last {
                return Err(ScenarioError::at(path("time_ms"), "events must be in time order"));
            }
            if e.time_ms > self.duration_ms {
                return Err(ScenarioError::at(path("time_ms"), "after the end of the run"));
            }
            last = e.time_ms;
            let device = match &e.event {
                ScriptEvent::Command { device, .. }
                | ScriptEvent::Fault { device, .. }
                | ScriptEvent::PcaButton { device, .. }
                | ScriptEvent::XrayRequest { device, .. }
                | ScriptEvent::CpbPhase { device, .. } => Some(device),
                ScriptEvent::Override { .. } => None,
            };
            let kind = match device {
                Some(d) => Some(
                    *kind_of
                        .get(d.as_str())
                        .ok_or_else(|| ScenarioError::at(path("device"), format!("unknown device {d}")))?,
                ),
                None => None,
            };
            match &e.event {
                ScriptEvent::Command { issuer, .. } => {
                    if !clinicians.contains(issuer.as_str()) {
                        return Err(ScenarioError::at(path("issuer"), format!("unknown clinician {issuer}")));
                    }
                }
                ScriptEvent::Fault { device, duration_ms, .. } => {
                    if *duration_ms == 0 {
                        return Err(ScenarioError::at(path("duration_ms"), "must be positive"));
                    }
                    let (from, until) = (e.time_ms, e.time_ms + duration_ms);
                    let windows = faults.entry(device.as_str()).or_default();
                    if windows.iter().any(|(f, u)| from < *u && *f < until) {
                        return Err(ScenarioError::at(path("time_ms"), "fault overlaps an earlier fault on the same device"));
                    }
                    windows.push((from, until));
                }
                ScriptEvent::PcaButton { every_ms, until_ms, .. } => {
                    if kind != Some(DeviceKind::PcaPump) {
                        return Err(ScenarioError::at(path("device"), "not a PCA pump"));
                    }
                    if every_ms == &Some(0) {
                        return Err(ScenarioError::at(path("every_ms"), "must be positive"));
                    }
                    if until_ms.is_some_and(|u| u > self.duration_ms) {
                        return Err(ScenarioError::at(path("until_ms"), "after the end of the run"));
                    }
                }
                ScriptEvent::XrayRequest { .. } => {
                    if kind != Some(DeviceKind::Xray) {
                        return Err(ScenarioError::at(path("device"), "not an x-ray"));
                    }
                }
                ScriptEvent::CpbPhase { .. } => {
                    if kind != Some(DeviceKind::CpbMachine) {
                        return Err(ScenarioError::at(path("device"), "not a bypass machine"));
                    }
                }
                ScriptEvent::Override { app, clinician, .. } => {
                    if !app_ids.contains(app) {
                        return Err(ScenarioError::at(path("app"), format!("unknown app {app}")));
                    }
                    if !clinicians.contains(clinician.as_str()) {
                        return Err(ScenarioError::at(path("clinician"), format!("unknown clinician {clinician}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// The script with repeated button presses unrolled, in time order.
    pub fn expanded_script(&self) -> Vec<ScriptEntry> {
        let mut out = Vec::new();
        for e in &self.event_script {
            match &e.event {
                ScriptEvent::PcaButton {
                    device,
                    every_ms: Some(every),
                    until_ms,
                } => {
                    let until = until_ms.unwrap_or(self.duration_ms);
                    let mut t = e.time_ms;
                    while t <= until {
                        out.push(ScriptEntry {
                            time_ms: t,
                            event: ScriptEvent::PcaButton {
                                device: device.clone(),
                                every_ms: None,
                                until_ms: None,
                            },
                        });
                        t += every;
                    }
                }
                _ => out.push(e.clone()),
            }
        }
        out.sort_by_key(|e| e.time_ms);
        out
    }
}
