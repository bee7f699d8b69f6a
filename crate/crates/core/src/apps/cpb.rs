//! Cardiopulmonary-bypass ventilation interlock.
//!
//! While the patient is on bypass, low-acuity respiratory alarms are
//! nuisance and get suppressed. Weaning off bypass is refused until the
//! ventilator is confirmed running.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AppContext, AppError, ClinicalApp};
use crate::alarms::{Acuity, AlarmCategory, AlarmRequest, Suppression};
use crate::bus::{DeviceKind, SampleRef};
use crate::devices::Command;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpbConfig {
    pub cpb: Option<String>,
    pub ventilator: Option<String>,
    /// Ventilator status older than this counts as "not running".
    pub stale_ms: u64,
    pub retry_ms: u64,
}

impl Default for CpbConfig {
    fn default() -> Self {
        Self {
            cpb: None,
            ventilator: None,
            stale_ms: 5_000,
            retry_ms: 2_000,
        }
    }
}

pub fn bypass_suppression() -> Suppression {
    Suppression {
        cause_prefixes: vec!["resp.".into()],
        max_acuity: Acuity::Caution,
        reason: "patient on cardiopulmonary bypass".into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeanVerdict {
    NotRequested,
    Allow,
    Refuse,
}

/// Decides a wean request given the ventilator's confirmed state.
pub fn cpb_verdict(phase: f64, ventilator_running: Option<bool>) -> WeanVerdict {
    if phase != 1.0 {
        return WeanVerdict::NotRequested;
    }
    match ventilator_running {
        Some(true) => WeanVerdict::Allow,
        _ => WeanVerdict::Refuse,
    }
}

pub struct CpbInterlockApp {
    cfg: CpbConfig,
    phase: Option<(f64, SampleRef)>,
    vent: Option<(bool, u64, SampleRef)>,
    last_refusal_ms: Option<u64>,
    alarmed: bool,
}

impl CpbInterlockApp {
    pub fn new(cfg: CpbConfig) -> Self {
        Self {
            cfg,
            phase: None,
            vent: None,
            last_refusal_ms: None,
            alarmed: false,
        }
    }
}

impl ClinicalApp for CpbInterlockApp {
    fn step(&mut self, ctx: &mut AppContext<'_>) -> Result<(), AppError> {
        let now = ctx.now_ms;
        for s in ctx.take(DeviceKind::CpbMachine, "status")? {
            if let Some(p) = s.value("phase") {
                self.phase = Some((p, s.reference()));
            }
        }
        for s in ctx.take(DeviceKind::Ventilator, "status")? {
            if let Some(v) = s.value("running") {
                self.vent = Some((v >= 1.0, s.sim_time_ms, s.reference()));
            }
        }
        let Some((phase, phase_ref)) = self.phase else {
            ctx.note("no bypass status");
            return Ok(());
        };
        let fresh_vent = self.vent.filter(|(_, at, _)| now.saturating_sub(*at) <= self.cfg.stale_ms);
        let running = fresh_vent.map(|(r, _, _)| r);
        ctx.suppress((phase >= 1.0).then(bypass_suppression));
        ctx.rationale(json!({"phase": phase, "ventilator_running": running}));

        match cpb_verdict(phase, running) {
            WeanVerdict::NotRequested => {
                self.alarmed = false;
                ctx.note(if phase >= 2.0 { "on bypass" } else { "off bypass" });
            }
            WeanVerdict::Allow => {
                self.alarmed = false;
                ctx.note("wean allowed: ventilation confirmed");
            }
            WeanVerdict::Refuse => {
                let mut cites = vec![phase_ref];
                cites.extend(self.vent.map(|(_, _, r)| r));
                if !self.alarmed {
                    self.alarmed = true;
                    ctx.alarm(
                        AlarmRequest::new(
                            Acuity::Crisis,
                            AlarmCategory::Physiologic,
                            "cpb.wean_without_ventilation",
                            "wean from bypass requested while lungs are not ventilated; resume ventilation first",
                        )
                        .citing(cites.iter().copied()),
                    );
                }
                if self.last_refusal_ms.is_none_or(|t| now >= t + self.cfg.retry_ms) {
                    if let Some(cpb) = ctx.target(DeviceKind::CpbMachine, self.cfg.cpb.as_deref()) {
                        ctx.command(&cpb, Command::new("refuse_wean"), cites, None)?;
                        self.last_refusal_ms = Some(now);
                    }
                }
                ctx.note("wean refused");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;

    fn io() -> FakeIo {
        FakeIo::default()
            .device(DeviceKind::CpbMachine, "cpb-1", &["refuse_wean"])
            .device(DeviceKind::Ventilator, "vent-1", &["pause", "resume"])
    }

    fn tick(io: &mut FakeIo, app: &mut CpbInterlockApp, t: u64, phase: f64, running: bool) -> super::super::ControlDecision {
        io.push(DeviceKind::CpbMachine, "status", t, &[("phase", phase)]);
        io.push(DeviceKind::Ventilator, "status", t, &[("running", if running { 1.0 } else { 0.0 })]);
        run(app, io, t, vec![])
    }

    #[test]
    fn wean_with_ventilation_is_allowed() {
        let mut io = io();
        let mut app = CpbInterlockApp::new(CpbConfig::default());
        let d = tick(&mut io, &mut app, 0, 1.0, true);
        assert!(d.commands.is_empty() && d.alarms.is_empty());
    }

    #[test]
    fn wean_without_ventilation_is_refused() {
        let mut io = io();
        let mut app = CpbInterlockApp::new(CpbConfig::default());
        let d = tick(&mut io, &mut app, 0, 1.0, false);
        assert_eq!(d.commands[0].command.verb, "refuse_wean");
        assert_eq!(d.alarms[0].acuity, Acuity::Crisis);
    }

    #[test]
    fn bypass_installs_suppression() {
        let mut io = io();
        let mut app = CpbInterlockApp::new(CpbConfig::default());
        assert!(tick(&mut io, &mut app, 0, 2.0, false).suppression.is_some());
        assert!(tick(&mut io, &mut app, 1000, 0.0, true).suppression.is_none());
    }

    #[test]
    fn verdict_table() {
        assert_eq!(cpb_verdict(2.0, None), WeanVerdict::NotRequested);
        assert_eq!(cpb_verdict(1.0, Some(true)), WeanVerdict::Allow);
        assert_eq!(cpb_verdict(1.0, Some(false)), WeanVerdict::Refuse);
        assert_eq!(cpb_verdict(1.0, None), WeanVerdict::Refuse);
    }
}
