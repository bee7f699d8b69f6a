//! Clinical applications hosted by the supervisor.
//!
//! An app sees the world only through an [`AppContext`]: it takes samples
//! from the streams its manifest subscribes to and queues commands for the
//! devices its manifest may command. Every take and every command costs one
//! bus operation against the app's per-period budget.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::alarms::{AlarmRequest, Suppression};
use crate::bus::{DeviceKind, Sample, SampleRef};
use crate::devices::Command;
use crate::patient::PatientRecord;

pub mod busy;
pub mod cpb;
pub mod monitor;
pub mod pca;
pub mod pclc;
pub mod protocol;
pub mod xray;

pub use busy::{BusyLoopApp, BusyLoopConfig};
pub use cpb::{CpbConfig, CpbInterlockApp};
pub use monitor::{MonitorApp, MonitorConfig};
pub use pca::{PcaConfig, PcaInterlockApp};
pub use pclc::{pclc_law, PclcApp, PclcConfig, PclcLaw, Regime};
pub use protocol::{InsulinProtocolApp, ProtocolConfig};
pub use xray::{XraySyncApp, XrayConfig};

/// Clinician directive delivered to an app at its next period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "directive", rename_all = "snake_case")]
pub enum Directive {
    HoldAutomation,
    ResumeAutomation,
    SetManualRate { rate: f64 },
    AcknowledgeAlarm { alarm_id: u64 },
    UnlockPca,
}

impl Directive {
    pub fn name(&self) -> &'static str {
        match self {
            Directive::HoldAutomation => "hold_automation",
            Directive::ResumeAutomation => "resume_automation",
            Directive::SetManualRate { .. } => "set_manual_rate",
            Directive::AcknowledgeAlarm { .. } => "acknowledge_alarm",
            Directive::UnlockPca => "unlock_pca",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverrideEntry {
    /// Log seq of the OVERRIDE record.
    pub seq: u64,
    pub clinician: String,
    pub directive: Directive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IssuedCommand {
    pub device_id: String,
    pub command: Command,
    pub cites: Vec<SampleRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub override_seq: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub app_id: String,
    pub period_index: u64,
    pub commands: Vec<IssuedCommand>,
    pub alarms: Vec<AlarmRequest>,
    pub rationale: Value,
    pub note: Option<String>,
    /// Alarm suppression the app wants in force after this period.
    pub suppression: Option<Suppression>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AppError {
    #[error("tick budget of {budget} bus operations exhausted")]
    BudgetExceeded { budget: u32 },
    #[error("no route to {device}/{verb}")]
    NoRoute { device: String, verb: String },
}

/// What the supervisor exposes to a running app.
pub trait AppIo {
    /// Drains every reader bound to (kind, stream). Returns the samples and
    /// the number of bus operations it took.
    fn take(&mut self, kind: DeviceKind, stream: &str) -> (Vec<Sample>, u32);
    fn can_command(&self, device_id: &str, verb: &str) -> bool;
    /// Discovered devices of a kind, by id.
    fn devices_of(&self, kind: DeviceKind) -> Vec<String>;
}

/// Per-period view an app runs against.
pub struct AppContext<'a> {
    pub now_ms: u64,
    pub period_ms: u64,
    pub overrides: Vec<OverrideEntry>,
    budget: u32,
    used: u32,
    exhausted: bool,
    io: &'a mut dyn AppIo,
    decision: ControlDecision,
    failures: Vec<AppError>,
}

impl<'a> AppContext<'a> {
    pub fn new(app_id: &str, period_index: u64, now_ms: u64, period_ms: u64, budget: u32, overrides: Vec<OverrideEntry>, io: &'a mut dyn AppIo) -> Self {
        Self {
            now_ms,
            period_ms,
            overrides,
            budget,
            used: 0,
            exhausted: false,
            io,
            decision: ControlDecision {
                app_id: app_id.to_string(),
                period_index,
                commands: Vec::new(),
                alarms: Vec::new(),
                rationale: Value::Null,
                note: None,
                suppression: None,
            },
            failures: Vec::new(),
        }
    }

    fn charge(&mut self, ops: u32) -> Result<(), AppError> {
        if self.exhausted || self.used + ops > self.budget {
            self.exhausted = true;
            return Err(AppError::BudgetExceeded { budget: self.budget });
        }
        self.used += ops;
        Ok(())
    }

    pub fn budget_used(&self) -> u32 {
        self.used
    }

    pub fn exhausted(&self) -> bool {
        self.exhausted
    }

    pub fn take(&mut self, kind: DeviceKind, stream: &str) -> Result<Vec<Sample>, AppError> {
        if self.exhausted || self.used >= self.budget {
            self.exhausted = true;
            return Err(AppError::BudgetExceeded { budget: self.budget });
        }
        let (samples, ops) = self.io.take(kind, stream);
        // the reads already happened; only the accounting can saturate
        self.used = (self.used + ops.max(1)).min(self.budget);
        Ok(samples)
    }

    pub fn devices_of(&self, kind: DeviceKind) -> Vec<String> {
        self.io.devices_of(kind)
    }

    /// First discovered device of a kind unless `preferred` names one.
    pub fn target(&self, kind: DeviceKind, preferred: Option<&str>) -> Option<String> {
        match preferred {
            Some(id) => Some(id.to_string()),
            None => self.io.devices_of(kind).into_iter().next(),
        }
    }

    pub fn command(&mut self, device_id: &str, command: Command, cites: Vec<SampleRef>, override_seq: Option<u64>) -> Result<(), AppError> {
        if !self.io.can_command(device_id, &command.verb) {
            let err = AppError::NoRoute {
                device: device_id.to_string(),
                verb: command.verb.clone(),
            };
            self.failures.push(err.clone());
            return Err(err);
        }
        self.charge(1)?;
        self.decision.commands.push(IssuedCommand {
            device_id: device_id.to_string(),
            command,
            cites,
            override_seq,
        });
        Ok(())
    }

    pub fn alarm(&mut self, req: AlarmRequest) {
        self.decision.alarms.push(req);
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.decision.note = Some(note.into());
    }

    pub fn rationale(&mut self, v: Value) {
        self.decision.rationale = v;
    }

    pub fn suppress(&mut self, rule: Option<Suppression>) {
        self.decision.suppression = rule;
    }

    pub fn failures(&self) -> &[AppError] {
        &self.failures
    }

    pub fn into_decision(self) -> (ControlDecision, Vec<AppError>) {
        (self.decision, self.failures)
    }
}

pub trait ClinicalApp: Send {
    fn step(&mut self, ctx: &mut AppContext<'_>) -> Result<(), AppError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AppConfig {
    Pclc(#[serde(default)] PclcConfig),
    PcaInterlock(#[serde(default)] PcaConfig),
    XraySync(#[serde(default)] XrayConfig),
    CpbInterlock(#[serde(default)] CpbConfig),
    Monitor(#[serde(default)] MonitorConfig),
    InsulinProtocol(#[serde(default)] ProtocolConfig),
    BusyLoop(#[serde(default)] BusyLoopConfig),
}

impl AppConfig {
    pub fn build(&self, record: &PatientRecord) -> Box<dyn ClinicalApp> {
        match self {
            AppConfig::Pclc(c) => Box::new(PclcApp::new(c.clone(), record.clone())),
            AppConfig::PcaInterlock(c) => Box::new(PcaInterlockApp::new(c.clone())),
            AppConfig::XraySync(c) => Box::new(XraySyncApp::new(c.clone())),
            AppConfig::CpbInterlock(c) => Box::new(CpbInterlockApp::new(c.clone())),
            AppConfig::Monitor(c) => Box::new(MonitorApp::new(c.clone())),
            AppConfig::InsulinProtocol(c) => Box::new(InsulinProtocolApp::new(c.clone())),
            AppConfig::BusyLoop(c) => Box::new(BusyLoopApp::new(c.clone())),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AppConfig::Pclc(_) => "pclc",
            AppConfig::PcaInterlock(_) => "pca_interlock",
            AppConfig::XraySync(_) => "xray_sync",
            AppConfig::CpbInterlock(_) => "cpb_interlock",
            AppConfig::Monitor(_) => "monitor",
            AppConfig::InsulinProtocol(_) => "insulin_protocol",
            AppConfig::BusyLoop(_) => "busy_loop",
        }
    }
}

/// Newest sample carrying `field`. Empty (null-data) payloads are skipped.
pub fn latest_with<'s>(samples: &'s [Sample], field: &str) -> Option<(&'s Sample, f64)> {
    samples
        .iter()
        .filter_map(|s| s.value(field).map(|v| (s, v)))
        .max_by_key(|(s, _)| (s.sim_time_ms, s.seq))
}

/// Last valid reading of one channel as an app remembers it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reading {
    pub at_ms: u64,
    pub value: f64,
    pub source: SampleRef,
}

impl Reading {
    pub fn from_sample(s: &Sample, value: f64) -> Self {
        Self {
            at_ms: s.sim_time_ms,
            value,
            source: s.reference(),
        }
    }

    pub fn age(&self, now_ms: u64) -> u64 {
        now_ms.saturating_sub(self.at_ms)
    }
}

/// Tracks how long a condition has held across successive readings.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sustain {
    since: Option<Reading>,
    last: Option<Reading>,
}

impl Sustain {
    pub fn observe(&mut self, r: Reading, holds: bool) {
        if holds {
            if self.since.is_none() {
                self.since = Some(r);
            }
            self.last = Some(r);
        } else {
            self.since = None;
            self.last = None;
        }
    }

    /// Span between the first and latest readings of the current run.
    pub fn held_ms(&self) -> Option<u64> {
        Some(self.last?.at_ms - self.since?.at_ms)
    }

    pub fn evidence(&self) -> Vec<SampleRef> {
        let mut v: Vec<SampleRef> = [self.since, self.last].into_iter().flatten().map(|r| r.source).collect();
        v.dedup();
        v
    }

    pub fn last(&self) -> Option<Reading> {
        self.last
    }
}
