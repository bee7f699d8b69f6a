//! PCA safety interlock: locks the pump out on sustained respiratory
//! depression or when its evidence goes missing.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AppContext, AppError, ClinicalApp, Reading, Sustain};
use crate::alarms::{Acuity, AlarmCategory, AlarmRequest};
use crate::bus::{DeviceKind, SampleRef};
use crate::devices::{Command, DeviceMode, PcaMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcaConfig {
    pub pca_pump: Option<String>,
    pub spo2_low: f64,
    pub spo2_sustain_ms: u64,
    pub resp_rate_low: f64,
    pub resp_rate_sustain_ms: u64,
    pub etco2_high: f64,
    /// Inputs older than this trigger the fail-safe lockout.
    pub stale_ms: u64,
    /// Minimum spacing between repeated lockout commands.
    pub retry_ms: u64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            pca_pump: None,
            spo2_low: 90.0,
            spo2_sustain_ms: 15_000,
            resp_rate_low: 8.0,
            resp_rate_sustain_ms: 30_000,
            etco2_high: 60.0,
            stale_ms: 10_000,
            retry_ms: 3_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Trigger {
    Spo2Low,
    RespRateLow,
    Etco2High,
    Stale(&'static str),
}

/// Accumulated view of the interlock's inputs.
#[derive(Clone, Debug, Default)]
pub struct PcaWindow {
    pub spo2: Sustain,
    pub resp_rate: Sustain,
    pub etco2: Option<Reading>,
    pub last_spo2: Option<Reading>,
    pub last_capno: Option<Reading>,
}

impl PcaWindow {
    pub fn observe_spo2(&mut self, r: Reading, cfg: &PcaConfig) {
        self.spo2.observe(r, r.value < cfg.spo2_low);
        self.last_spo2 = Some(r);
    }

    pub fn observe_capno(&mut self, etco2: Option<Reading>, resp_rate: Option<Reading>, cfg: &PcaConfig) {
        if let Some(rr) = resp_rate {
            self.resp_rate.observe(rr, rr.value < cfg.resp_rate_low);
            self.last_capno = Some(rr);
        }
        if let Some(e) = etco2 {
            self.etco2 = Some(e);
            self.last_capno = Some(e);
        }
    }
}

/// Interlock decision over the current window: which triggers hold now.
pub fn pca_evaluate(w: &PcaWindow, now_ms: u64, started_ms: u64, cfg: &PcaConfig) -> Vec<(Trigger, Vec<SampleRef>)> {
    let mut out = Vec::new();
    if w.spo2.held_ms().is_some_and(|h| h >= cfg.spo2_sustain_ms) {
        out.push((Trigger::Spo2Low, w.spo2.evidence()));
    }
    if w.resp_rate.held_ms().is_some_and(|h| h >= cfg.resp_rate_sustain_ms) {
        out.push((Trigger::RespRateLow, w.resp_rate.evidence()));
    }
    if let Some(e) = w.etco2.filter(|e| e.value > cfg.etco2_high) {
        out.push((Trigger::Etco2High, vec![e.source]));
    }
    let age = |r: Option<Reading>| r.map_or(now_ms - started_ms, |r| r.age(now_ms));
    if age(w.last_spo2) > cfg.stale_ms {
        out.push((Trigger::Stale("pulse oximetry"), w.last_spo2.map(|r| r.source).into_iter().collect()));
    }
    if age(w.last_capno) > cfg.stale_ms {
        out.push((Trigger::Stale("capnography"), w.last_capno.map(|r| r.source).into_iter().collect()));
    }
    out
}

pub struct PcaInterlockApp {
    cfg: PcaConfig,
    window: PcaWindow,
    started_ms: Option<u64>,
    pump_mode: Option<(DeviceMode, SampleRef)>,
    last_lockout_ms: Option<u64>,
    active: Vec<Trigger>,
}

impl PcaInterlockApp {
    pub fn new(cfg: PcaConfig) -> Self {
        Self {
            cfg,
            window: PcaWindow::default(),
            started_ms: None,
            pump_mode: None,
            last_lockout_ms: None,
            active: Vec::new(),
        }
    }
}

impl ClinicalApp for PcaInterlockApp {
    fn step(&mut self, ctx: &mut AppContext<'_>) -> Result<(), AppError> {
        let now = ctx.now_ms;
        let started = *self.started_ms.get_or_insert(now);
        for s in ctx.take(DeviceKind::PulseOx, "spo2")? {
            if let Some(v) = s.value("spo2") {
                self.window.observe_spo2(Reading::from_sample(&s, v), &self.cfg);
            }
        }
        for s in ctx.take(DeviceKind::Capnometer, "etco2")? {
            let e = s.value("etco2").map(|v| Reading::from_sample(&s, v));
            let rr = s.value("resp_rate").map(|v| Reading::from_sample(&s, v));
            self.window.observe_capno(e, rr, &self.cfg);
        }
        for s in ctx.take(DeviceKind::PcaPump, "status")? {
            if let Some(code) = s.value("mode") {
                let mode = if code >= 1.0 { PcaMode::Armed } else { PcaMode::LockedOut };
                self.pump_mode = Some((DeviceMode::Pca(mode), s.reference()));
            }
        }

        let triggers = pca_evaluate(&self.window, now, started, &self.cfg);
        ctx.rationale(json!({
            "spo2": self.window.last_spo2.map(|r| r.value),
            "resp_rate": self.window.resp_rate.last().map(|r| r.value),
            "etco2": self.window.etco2.map(|r| r.value),
            "triggers": triggers.iter().map(|(t, _)| format!("{t:?}")).collect::<Vec<_>>(),
        }));
        if triggers.is_empty() {
            self.active.clear();
            ctx.note("monitoring");
            return Ok(());
        }

        for (t, evidence) in &triggers {
            if self.active.contains(t) {
                continue;
            }
            let req = match t {
                Trigger::Spo2Low => AlarmRequest::new(
                    Acuity::Crisis,
                    AlarmCategory::Physiologic,
                    "pca.spo2_low",
                    format!("SpO2 below {}% for {} s; PCA locked out", self.cfg.spo2_low, self.cfg.spo2_sustain_ms / 1000),
                ),
                Trigger::RespRateLow => AlarmRequest::new(
                    Acuity::Crisis,
                    AlarmCategory::Physiologic,
                    "pca.resp_rate_low",
                    format!(
                        "respiratory rate below {}/min for {} s; PCA locked out",
                        self.cfg.resp_rate_low,
                        self.cfg.resp_rate_sustain_ms / 1000
                    ),
                ),
                Trigger::Etco2High => AlarmRequest::new(
                    Acuity::Crisis,
                    AlarmCategory::Physiologic,
                    "pca.etco2_high",
                    format!("EtCO2 above {} mmHg; PCA locked out", self.cfg.etco2_high),
                ),
                Trigger::Stale(what) => AlarmRequest::new(
                    Acuity::Crisis,
                    AlarmCategory::Technical,
                    "pca.input_stale",
                    format!("no valid {what} for {} s; PCA locked out as a precaution", self.cfg.stale_ms / 1000),
                ),
            };
            ctx.alarm(req.citing(evidence.iter().copied()));
        }
        self.active = triggers.iter().map(|(t, _)| t.clone()).collect();

        let armed = !matches!(self.pump_mode, Some((DeviceMode::Pca(PcaMode::LockedOut), _)));
        let due = self.last_lockout_ms.is_none_or(|t| now >= t + self.cfg.retry_ms);
        if armed && due {
            if let Some(pump) = ctx.target(DeviceKind::PcaPump, self.cfg.pca_pump.as_deref()) {
                let mut cites: Vec<SampleRef> = triggers.iter().flat_map(|(_, e)| e.iter().copied()).collect();
                cites.sort();
                cites.dedup();
                ctx.command(&pump, Command::new("lockout"), cites, None)?;
                self.last_lockout_ms = Some(now);
            }
        }
        ctx.note("LOCKOUT");
        Ok(())
    }
}
