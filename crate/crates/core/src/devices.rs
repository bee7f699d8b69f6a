//! Equipment-interface emulators.
//!
//! Each device samples the patient's measured vitals, publishes its declared
//! streams on their nominal periods, executes commands through a per-kind
//! state machine and contributes its actuation to the patient's inputs.
//!
//! Per-kind machines:
//!
//! ```text
//! pump        STOPPED <-> RUNNING, RUNNING -> OCCLUDED (fault) -> STOPPED
//! ventilator  RUNNING <-> PAUSED (optional auto-resume)
//! pca         ARMED <-> LOCKED_OUT (unlock by clinician only)
//! x-ray       IDLE -> EXPOSING (2 s) -> IDLE
//! cpb         OFF -> ON_BYPASS -> WEAN_REQUESTED -> OFF, WEAN_REQUESTED -> ON_BYPASS (refused)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{payload_of, DeviceDescriptor, DeviceKind, Measurement, Payload, Sample};
use crate::patient::PatientInputs;

/// Opioid delivered per accepted PCA demand, µg.
pub const PCA_DOSE_UG: f64 = 20.0;
/// Device-local minimum spacing between PCA doses.
pub const PCA_LOCKOUT_INTERVAL_MS: u64 = 6 * 60_000;
pub const XRAY_EXPOSURE_MS: u64 = 2_000;
/// Infusion-pump boluses are spread over this window.
pub const PUMP_BOLUS_MS: u64 = 5 * 60_000;
/// Delay between a wean request and the CPB pump actually stopping.
pub const CPB_WEAN_DELAY_MS: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PumpMode {
    Stopped,
    Running,
    Occluded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VentilatorMode {
    Running,
    Paused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PcaMode {
    Armed,
    LockedOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum XrayMode {
    Idle,
    Exposing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CpbMode {
    Off,
    OnBypass,
    WeanRequested,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "mode", rename_all = "snake_case")]
pub enum DeviceMode {
    Monitoring,
    Pump(PumpMode),
    Ventilator(VentilatorMode),
    Pca(PcaMode),
    Xray(XrayMode),
    Cpb(CpbMode),
}

impl DeviceMode {
    pub fn initial(kind: DeviceKind) -> Self {
        match kind {
            DeviceKind::InfusionPump => DeviceMode::Pump(PumpMode::Stopped),
            DeviceKind::PcaPump => DeviceMode::Pca(PcaMode::Armed),
            DeviceKind::Ventilator => DeviceMode::Ventilator(VentilatorMode::Running),
            DeviceKind::Xray => DeviceMode::Xray(XrayMode::Idle),
            DeviceKind::CpbMachine => DeviceMode::Cpb(CpbMode::Off),
            _ => DeviceMode::Monitoring,
        }
    }

    /// Numeric code published on status streams.
    pub fn code(self) -> f64 {
        match self {
            DeviceMode::Monitoring => 1.0,
            DeviceMode::Pump(m) => match m {
                PumpMode::Stopped => 0.0,
                PumpMode::Running => 1.0,
                PumpMode::Occluded => 2.0,
            },
            DeviceMode::Ventilator(m) => match m {
                VentilatorMode::Paused => 0.0,
                VentilatorMode::Running => 1.0,
            },
            DeviceMode::Pca(m) => match m {
                PcaMode::LockedOut => 0.0,
                PcaMode::Armed => 1.0,
            },
            DeviceMode::Xray(m) => match m {
                XrayMode::Idle => 0.0,
                XrayMode::Exposing => 1.0,
            },
            DeviceMode::Cpb(m) => match m {
                CpbMode::Off => 0.0,
                CpbMode::WeanRequested => 1.0,
                CpbMode::OnBypass => 2.0,
            },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DeviceMode::Monitoring => "MONITORING",
            DeviceMode::Pump(PumpMode::Stopped) => "STOPPED",
            DeviceMode::Pump(PumpMode::Running) => "RUNNING",
            DeviceMode::Pump(PumpMode::Occluded) => "OCCLUDED",
            DeviceMode::Ventilator(VentilatorMode::Running) => "RUNNING",
            DeviceMode::Ventilator(VentilatorMode::Paused) => "PAUSED",
            DeviceMode::Pca(PcaMode::Armed) => "ARMED",
            DeviceMode::Pca(PcaMode::LockedOut) => "LOCKED_OUT",
            DeviceMode::Xray(XrayMode::Idle) => "IDLE",
            DeviceMode::Xray(XrayMode::Exposing) => "EXPOSING",
            DeviceMode::Cpb(CpbMode::Off) => "OFF",
            DeviceMode::Cpb(CpbMode::OnBypass) => "ON_BYPASS",
            DeviceMode::Cpb(CpbMode::WeanRequested) => "WEAN_REQUESTED",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    NullData,
    StuckValue,
    Dropout,
    InterfaceError,
    /// Pump line occlusion; the pump stops delivering.
    Occlusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub kind: FaultKind,
    pub from_ms: u64,
    pub until_ms: u64,
}

impl Fault {
    pub fn new(kind: FaultKind, from_ms: u64, until_ms: u64) -> Self {
        Self { kind, from_ms, until_ms }
    }

    pub fn is_active(&self, now_ms: u64) -> bool {
        self.from_ms <= now_ms && now_ms < self.until_ms
    }

    fn overlaps(&self, other: &Fault) -> bool {
        self.from_ms < other.until_ms && other.from_ms < self.until_ms
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drug {
    /// Rates in U/hr, boluses in U.
    Insulin,
    /// Rates in mg/min, boluses in mg.
    Dextrose,
}

impl Drug {
    pub fn rate_unit(self) -> &'static str {
        match self {
            Drug::Insulin => "U/h",
            Drug::Dextrose => "mg/min",
        }
    }

    fn bolus_rate(self, amount: f64, over_ms: u64) -> f64 {
        match self {
            Drug::Insulin => amount * 3_600_000.0 / over_ms as f64,
            Drug::Dextrose => amount * 60_000.0 / over_ms as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub verb: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ms: Option<u64>,
}

impl Command {
    pub fn new(verb: impl Into<String>) -> Self {
        Self {
            verb: verb.into(),
            arg: None,
            duration_ms: None,
        }
    }

    pub fn with_arg(mut self, arg: f64) -> Self {
        self.arg = Some(arg);
        self
    }

    pub fn with_duration(mut self, ms: u64) -> Self {
        self.duration_ms = Some(ms);
        self
    }

    pub fn to_payload(&self) -> Payload {
        let mut p = Payload::new();
        if let Some(a) = self.arg {
            p.insert("arg".into(), Measurement::new(a, ""));
        }
        if let Some(d) = self.duration_ms {
            p.insert("duration_ms".into(), Measurement::new(d as f64, "ms"));
        }
        p
    }

    /// Rebuilds a command from a sample on `cmd/<device>/<verb>`.
    pub fn from_sample(sample: &Sample) -> Option<Self> {
        let verb = sample.topic.rsplit('/').next()?.to_string();
        Some(Self {
            verb,
            arg: sample.value("arg"),
            duration_ms: sample.value("duration_ms").map(|d| d.max(0.0) as u64),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("{device} does not support command {verb}")]
    UnsupportedCommand { device: String, verb: String },
    #[error("invalid argument for {verb}: {reason}")]
    InvalidArg { verb: String, reason: String },
    #[error("PCA is locked out")]
    RefusedLockedOut,
    #[error("PCA dose refused: {remaining_ms} ms left in lockout interval")]
    RefusedLockoutInterval { remaining_ms: u64 },
    #[error("role {role} may not issue {verb}")]
    Unauthorized { role: String, verb: String },
    #[error("pump is occluded")]
    RefusedOccluded,
    #[error("command lost: device interface unavailable")]
    Lost,
    #[error("fault window is empty or inverted")]
    InvalidFaultWindow,
    #[error("fault overlaps an existing fault window")]
    RejectedOverlap,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeChange {
    pub device_id: String,
    pub from: DeviceMode,
    pub to: DeviceMode,
    pub cause: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Emission {
    pub topic: String,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TickOutput {
    pub emissions: Vec<Emission>,
    pub inputs: PatientInputs,
    pub mode_changes: Vec<ModeChange>,
}

/// Scenario-level knobs for a device that are not part of its interface.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceSetup {
    #[serde(default)]
    pub drug: Option<Drug>,
    #[serde(default)]
    pub running: Option<bool>,
    #[serde(default)]
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceState {
    pub descriptor: DeviceDescriptor,
    pub mode: DeviceMode,
    pub setpoints: BTreeMap<String, f64>,
    pub drug: Option<Drug>,
    faults: Vec<Fault>,
    pub last_publish_ms: BTreeMap<String, u64>,
    last_payload: BTreeMap<String, Payload>,
    stuck: BTreeMap<String, Payload>,
    pub auto_resume_at: Option<u64>,
    bolus_rate: f64,
    bolus_until_ms: u64,
    pending_opioid: f64,
    pub pca_last_dose_ms: Option<u64>,
    pub pca_doses: u32,
    pub pca_total_ug: f64,
    exposure_until_ms: Option<u64>,
    wean_at_ms: Option<u64>,
    pending_request_ms: Option<u64>,
}

fn stream_of(topic: &str) -> &str {
    topic.rsplit('/').next().unwrap_or(topic)
}

impl DeviceState {
    pub fn new(descriptor: DeviceDescriptor, setup: &DeviceSetup) -> Self {
        let kind = descriptor.device_kind;
        let mut mode = DeviceMode::initial(kind);
        let mut setpoints = BTreeMap::new();
        if kind == DeviceKind::InfusionPump {
            setpoints.insert("rate".to_string(), setup.rate.unwrap_or(0.0));
            if setup.running.unwrap_or(true) {
                mode = DeviceMode::Pump(PumpMode::Running);
            }
        }
        if kind == DeviceKind::Ventilator && setup.running == Some(false) {
            mode = DeviceMode::Ventilator(VentilatorMode::Paused);
        }
        if kind == DeviceKind::CpbMachine && setup.running == Some(true) {
            mode = DeviceMode::Cpb(CpbMode::OnBypass);
        }
        Self {
            descriptor,
            mode,
            setpoints,
            drug: setup.drug.or((kind == DeviceKind::InfusionPump).then_some(Drug::Insulin)),
            faults: Vec::new(),
            last_publish_ms: BTreeMap::new(),
            last_payload: BTreeMap::new(),
            stuck: BTreeMap::new(),
            auto_resume_at: None,
            bolus_rate: 0.0,
            bolus_until_ms: 0,
            pending_opioid: 0.0,
            pca_last_dose_ms: None,
            pca_doses: 0,
            pca_total_ug: 0.0,
            exposure_until_ms: None,
            wean_at_ms: None,
            pending_request_ms: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.descriptor.device_id
    }

    pub fn kind(&self) -> DeviceKind {
        self.descriptor.device_kind
    }

    pub fn active_fault(&self, now_ms: u64) -> Option<Fault> {
        self.faults.iter().copied().find(|f| f.is_active(now_ms))
    }

    pub fn faults(&self) -> &[Fault] {
        &self.faults
    }

    /// Schedules a fault. Only one fault window may cover any instant.
    pub fn inject_fault(&mut self, fault: Fault) -> Result<(), DeviceError> {
        if fault.from_ms >= fault.until_ms {
            return Err(DeviceError::InvalidFaultWindow);
        }
        if self.faults.iter().any(|f| f.overlaps(&fault)) {
            return Err(DeviceError::RejectedOverlap);
        }
        self.faults.push(fault);
        self.faults.sort_by_key(|f| f.from_ms);
        Ok(())
    }

    fn interface_down(&self, now_ms: u64) -> bool {
        matches!(
            self.active_fault(now_ms).map(|f| f.kind),
            Some(FaultKind::Dropout | FaultKind::InterfaceError)
        )
    }

    fn set_mode(&mut self, to: DeviceMode, cause: &'static str, changes: &mut Vec<ModeChange>) {
        if self.mode != to {
            changes.push(ModeChange {
                device_id: self.id().to_string(),
                from: self.mode,
                to,
                cause,
            });
            self.mode = to;
        }
    }

    /// Executes a command. `issuer_role` is the bus role of whoever sent it.
    pub fn apply_command(&mut self, cmd: &Command, issuer_role: &str, now_ms: u64) -> Result<Vec<ModeChange>, DeviceError> {
        if self.interface_down(now_ms) {
            return Err(DeviceError::Lost);
        }
        if !self.descriptor.accepts(&cmd.verb) {
            return Err(DeviceError::UnsupportedCommand {
                device: self.id().to_string(),
                verb: cmd.verb.clone(),
            });
        }
        let invalid = |reason: &str| DeviceError::InvalidArg {
            verb: cmd.verb.clone(),
            reason: reason.to_string(),
        };
        let mut changes = Vec::new();
        match (self.mode, cmd.verb.as_str()) {
            (DeviceMode::Pump(_), "set_rate") => {
                let rate = cmd.arg.ok_or_else(|| invalid("missing rate"))?;
                if !(rate.is_finite() && rate >= 0.0) {
                    return Err(invalid("rate must be non-negative"));
                }
                self.setpoints.insert("rate".into(), rate);
            }
            (DeviceMode::Pump(PumpMode::Occluded), "start") => return Err(DeviceError::RefusedOccluded),
            (DeviceMode::Pump(_), "start") => self.set_mode(DeviceMode::Pump(PumpMode::Running), "command", &mut changes),
            (DeviceMode::Pump(m), "stop") => {
                if m != PumpMode::Occluded {
                    self.set_mode(DeviceMode::Pump(PumpMode::Stopped), "command", &mut changes);
                }
                self.bolus_until_ms = 0;
            }
            (DeviceMode::Pump(m), "bolus") => {
                let amount = cmd.arg.ok_or_else(|| invalid("missing amount"))?;
                if !(amount.is_finite() && amount > 0.0) {
                    return Err(invalid("amount must be positive"));
                }
                if m == PumpMode::Occluded {
                    return Err(DeviceError::RefusedOccluded);
                }
                let drug = self.drug.unwrap_or(Drug::Insulin);
                self.bolus_rate = drug.bolus_rate(amount, PUMP_BOLUS_MS);
                self.bolus_until_ms = now_ms + PUMP_BOLUS_MS;
                self.set_mode(DeviceMode::Pump(PumpMode::Running), "bolus", &mut changes);
            }
            (DeviceMode::Pca(PcaMode::LockedOut), "bolus") => return Err(DeviceError::RefusedLockedOut),
            (DeviceMode::Pca(PcaMode::Armed), "bolus") => {
                if let Some(last) = self.pca_last_dose_ms {
                    let next = last + PCA_LOCKOUT_INTERVAL_MS;
                    if now_ms < next {
                        return Err(DeviceError::RefusedLockoutInterval {
                            remaining_ms: next - now_ms,
                        });
                    }
                }
                self.pending_opioid += PCA_DOSE_UG;
                self.pca_last_dose_ms = Some(now_ms);
                self.pca_doses += 1;
                self.pca_total_ug += PCA_DOSE_UG;
            }
            (DeviceMode::Pca(_), "lockout") => {
                self.pending_opioid = 0.0;
                self.set_mode(DeviceMode::Pca(PcaMode::LockedOut), "command", &mut changes);
            }
            (DeviceMode::Pca(_), "unlock") => {
                if issuer_role != "clinician" {
                    return Err(DeviceError::Unauthorized {
                        role: issuer_role.to_string(),
                        verb: cmd.verb.clone(),
                    });
                }
                self.set_mode(DeviceMode::Pca(PcaMode::Armed), "clinician unlock", &mut changes);
            }
            (DeviceMode::Ventilator(_), "pause") => {
                self.auto_resume_at = cmd.duration_ms.filter(|d| *d > 0).map(|d| now_ms + d);
                self.set_mode(DeviceMode::Ventilator(VentilatorMode::Paused), "command", &mut changes);
            }
            (DeviceMode::Ventilator(_), "resume") => {
                self.auto_resume_at = None;
                self.set_mode(DeviceMode::Ventilator(VentilatorMode::Running), "command", &mut changes);
            }
            (DeviceMode::Xray(_), "expose") => {
                let dur = cmd.duration_ms.unwrap_or(XRAY_EXPOSURE_MS).max(1);
                self.exposure_until_ms = Some(now_ms + dur);
                self.set_mode(DeviceMode::Xray(XrayMode::Exposing), "command", &mut changes);
            }
            (DeviceMode::Cpb(CpbMode::WeanRequested), "refuse_wean") => {
                self.wean_at_ms = None;
                self.set_mode(DeviceMode::Cpb(CpbMode::OnBypass), "wean refused", &mut changes);
            }
            (DeviceMode::Cpb(_), "refuse_wean") => {}
            _ => {
                return Err(DeviceError::UnsupportedCommand {
                    device: self.id().to_string(),
                    verb: cmd.verb.clone(),
                })
            }
        }
        Ok(changes)
    }

    /// Queues an x-ray acquisition request for the next publish.
    pub fn request_exposure(&mut self, exposure_ms: u64) {
        self.pending_request_ms = Some(exposure_ms);
    }

    pub fn start_bypass(&mut self) -> Vec<ModeChange> {
        let mut changes = Vec::new();
        if self.kind() == DeviceKind::CpbMachine {
            self.wean_at_ms = None;
            self.set_mode(DeviceMode::Cpb(CpbMode::OnBypass), "bypass started", &mut changes);
        }
        changes
    }

    pub fn request_wean(&mut self, now_ms: u64) -> Vec<ModeChange> {
        let mut changes = Vec::new();
        if self.mode == DeviceMode::Cpb(CpbMode::OnBypass) {
            self.wean_at_ms = Some(now_ms + CPB_WEAN_DELAY_MS);
            self.set_mode(DeviceMode::Cpb(CpbMode::WeanRequested), "wean requested", &mut changes);
        }
        changes
    }

    fn advance_timers(&mut self, now_ms: u64, changes: &mut Vec<ModeChange>) {
        match self.mode {
            DeviceMode::Ventilator(VentilatorMode::Paused) => {
                if self.auto_resume_at.is_some_and(|t| now_ms >= t) {
                    self.auto_resume_at = None;
                    self.set_mode(DeviceMode::Ventilator(VentilatorMode::Running), "auto-resume", changes);
                }
            }
            DeviceMode::Xray(XrayMode::Exposing) => {
                if self.exposure_until_ms.is_some_and(|t| now_ms >= t) {
                    self.exposure_until_ms = None;
                    self.set_mode(DeviceMode::Xray(XrayMode::Idle), "exposure complete", changes);
                }
            }
            DeviceMode::Cpb(CpbMode::WeanRequested) if self.wean_at_ms.is_some_and(|t| now_ms >= t) => {
                self.wean_at_ms = None;
                self.set_mode(DeviceMode::Cpb(CpbMode::Off), "weaned", changes);
            }
            _ => {}
        }
        if let DeviceMode::Pump(m) = self.mode {
            let occluded = self.active_fault(now_ms).map(|f| f.kind) == Some(FaultKind::Occlusion);
            match (m, occluded) {
                (PumpMode::Running, true) => {
                    self.bolus_until_ms = 0;
                    self.set_mode(DeviceMode::Pump(PumpMode::Occluded), "occlusion", changes);
                }
                (PumpMode::Occluded, false) => self.set_mode(DeviceMode::Pump(PumpMode::Stopped), "occlusion cleared", changes),
                _ => {}
            }
        }
    }

    /// Actuation implied by the current mode and setpoints.
    pub fn contribution(&self, now_ms: u64) -> PatientInputs {
        let mut inputs = PatientInputs::default();
        match self.mode {
            DeviceMode::Pump(PumpMode::Running) => {
                let bolus = if now_ms < self.bolus_until_ms { self.bolus_rate } else { 0.0 };
                let rate = self.setpoints.get("rate").copied().unwrap_or(0.0) + bolus;
                match self.drug.unwrap_or(Drug::Insulin) {
                    Drug::Insulin => inputs.insulin_rate = rate,
                    Drug::Dextrose => inputs.dextrose_rate = rate,
                }
            }
            DeviceMode::Ventilator(VentilatorMode::Running) => inputs.ventilator_on = true,
            DeviceMode::Cpb(CpbMode::OnBypass | CpbMode::WeanRequested) => inputs.cpb_active = true,
            _ => {}
        }
        inputs.opioid_bolus = self.pending_opioid;
        inputs
    }

    fn status_payload(&self, now_ms: u64) -> Payload {
        let code = self.mode.code();
        match self.mode {
            DeviceMode::Pump(_) => {
                let unit = self.drug.unwrap_or(Drug::Insulin).rate_unit();
                let delivering = self.contribution(now_ms);
                let actual = delivering.insulin_rate + delivering.dextrose_rate;
                payload_of([
                    ("mode", code, ""),
                    ("rate", self.setpoints.get("rate").copied().unwrap_or(0.0), unit),
                    ("delivering", actual, unit),
                ])
            }
            DeviceMode::Pca(_) => payload_of([
                ("mode", code, ""),
                ("doses", self.pca_doses as f64, ""),
                ("total", self.pca_total_ug, "ug"),
            ]),
            DeviceMode::Ventilator(_) => payload_of([("running", code, "")]),
            DeviceMode::Xray(_) => payload_of([("exposing", code, "")]),
            DeviceMode::Cpb(_) => payload_of([("phase", code, "")]),
            DeviceMode::Monitoring => payload_of([("mode", code, "")]),
        }
    }

    fn measure(&self, stream: &str, vitals: &Payload, now_ms: u64) -> Option<Payload> {
        let pick = |names: &[&str]| -> Payload {
            names
                .iter()
                .filter_map(|n| vitals.get(*n).map(|m| (n.to_string(), m.clone())))
                .collect()
        };
        Some(match stream {
            "glucose" => pick(&["glucose"]),
            "spo2" => {
                let mut p = pick(&["spo2"]);
                if let Some(hr) = vitals.get("heart_rate") {
                    p.insert("pulse_rate".into(), hr.clone());
                }
                p
            }
            "etco2" => pick(&["etco2", "resp_rate"]),
            "hr" => pick(&["heart_rate"]),
            "temp" => pick(&["temperature"]),
            "bp" => pick(&["systolic", "diastolic"]),
            "status" => self.status_payload(now_ms),
            _ => return None,
        })
    }

    /// Advances timers, publishes due streams and reports actuation.
    pub fn tick(&mut self, vitals: &Payload, now_ms: u64) -> TickOutput {
        let mut out = TickOutput::default();
        self.advance_timers(now_ms, &mut out.mode_changes);
        out.inputs = self.contribution(now_ms);
        self.pending_opioid = 0.0;

        let fault = self.active_fault(now_ms);
        if fault.is_none_or(|f| f.kind != FaultKind::StuckValue) {
            self.stuck.clear();
        }
        let silent = matches!(fault.map(|f| f.kind), Some(FaultKind::Dropout | FaultKind::InterfaceError));

        if let Some(exposure) = self.pending_request_ms.take() {
            if let Some(t) = self.descriptor.published_topics.iter().find(|t| stream_of(&t.topic) == "request") {
                if !silent {
                    out.emissions.push(Emission {
                        topic: t.topic.clone(),
                        payload: payload_of([("exposure_ms", exposure as f64, "ms")]),
                    });
                }
            }
        }

        let topics: Vec<(String, u64)> = self
            .descriptor
            .published_topics
            .iter()
            .filter(|t| stream_of(&t.topic) != "request")
            .map(|t| (t.topic.clone(), t.nominal_rate_ms))
            .collect();
        for (topic, period) in topics {
            let due = self
                .last_publish_ms
                .get(&topic)
                .is_none_or(|last| now_ms >= last + period);
            if !due {
                continue;
            }
            self.last_publish_ms.insert(topic.clone(), now_ms);
            if silent {
                continue;
            }
            let Some(live) = self.measure(stream_of(&topic), vitals, now_ms) else {
                continue;
            };
            let payload = match fault.map(|f| f.kind) {
                Some(FaultKind::NullData) => Payload::new(),
                Some(FaultKind::StuckValue) => self.stuck.entry(topic.clone()).or_insert(live).clone(),
                _ => live,
            };
            self.last_payload.insert(topic.clone(), payload.clone());
            out.emissions.push(Emission { topic, payload });
        }
        out
    }
}
