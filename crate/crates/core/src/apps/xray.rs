//! Ventilator / x-ray synchronization with a pause watchdog.
//!
//! On an acquisition request the app pauses the ventilator with an automatic
//! resume just long enough for the exposure, then triggers the exposure once
//! the pause is confirmed. Independently, any pause (including ones a
//! clinician started by hand) is ended by the watchdog before it exceeds the
//! configured maximum.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AppContext, AppError, ClinicalApp};
use crate::alarms::{Acuity, AlarmCategory, AlarmRequest};
use crate::bus::{DeviceKind, SampleRef};
use crate::devices::Command;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XrayConfig {
    pub ventilator: Option<String>,
    pub xray: Option<String>,
    pub margin_ms: u64,
    pub max_pause_ms: u64,
    /// How long a watchdog resume may go unconfirmed before escalating.
    pub resume_ack_ms: u64,
    /// Give up on an exposure whose pause is not confirmed in time.
    pub pause_confirm_ms: u64,
}

impl Default for XrayConfig {
    fn default() -> Self {
        Self {
            ventilator: None,
            xray: None,
            margin_ms: 8_000,
            max_pause_ms: 60_000,
            resume_ack_ms: 3_000,
            pause_confirm_ms: 5_000,
        }
    }
}

/// Pause length for an exposure: exposure plus margin, never above the cap.
pub fn pause_for_exposure(exposure_ms: u64, cfg: &XrayConfig) -> u64 {
    (exposure_ms + cfg.margin_ms).min(cfg.max_pause_ms)
}

/// Whether the watchdog must end a pause now so that, with one period of
/// command latency, it does not exceed the cap.
pub fn watchdog_due(paused_since_ms: u64, now_ms: u64, period_ms: u64, cfg: &XrayConfig) -> bool {
    now_ms.saturating_sub(paused_since_ms) + period_ms >= cfg.max_pause_ms
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Phase {
    Idle,
    AwaitingPause { since_ms: u64, exposure_ms: u64, request: SampleRef },
}

pub struct XraySyncApp {
    cfg: XrayConfig,
    phase: Phase,
    vent_running: Option<(bool, u64, SampleRef)>,
    paused_since: Option<(u64, SampleRef)>,
    watchdog_fired_ms: Option<u64>,
    last_resume_ms: Option<u64>,
    escalated: bool,
}

impl XraySyncApp {
    pub fn new(cfg: XrayConfig) -> Self {
        Self {
            cfg,
            phase: Phase::Idle,
            vent_running: None,
            paused_since: None,
            watchdog_fired_ms: None,
            last_resume_ms: None,
            escalated: false,
        }
    }
}

impl ClinicalApp for XraySyncApp {
    fn step(&mut self, ctx: &mut AppContext<'_>) -> Result<(), AppError> {
        let now = ctx.now_ms;
        let requests = ctx.take(DeviceKind::Xray, "request")?;
        for s in ctx.take(DeviceKind::Ventilator, "status")? {
            if let Some(v) = s.value("running") {
                let running = v >= 1.0;
                self.vent_running = Some((running, s.sim_time_ms, s.reference()));
                if running {
                    self.paused_since = None;
                    self.watchdog_fired_ms = None;
                    self.escalated = false;
                } else if self.paused_since.is_none() {
                    self.paused_since = Some((s.sim_time_ms, s.reference()));
                }
            }
        }
        let Some(vent) = ctx.target(DeviceKind::Ventilator, self.cfg.ventilator.as_deref()) else {
            ctx.note("no ventilator");
            return Ok(());
        };

        if let Some((since, status_ref)) = self.paused_since {
            if watchdog_due(since, now, ctx.period_ms, &self.cfg) {
                match self.watchdog_fired_ms {
                    None => {
                        ctx.command(&vent, Command::new("resume"), vec![status_ref], None)?;
                        self.watchdog_fired_ms = Some(now);
                        self.last_resume_ms = Some(now);
                        ctx.alarm(
                            AlarmRequest::new(
                                Acuity::Warning,
                                AlarmCategory::Technical,
                                "ventilator.pause_limit",
                                format!("ventilator paused {} s; resuming", (now - since) / 1000),
                            )
                            .citing([status_ref]),
                        );
                    }
                    Some(fired) if now >= fired + self.cfg.resume_ack_ms => {
                        if !self.escalated {
                            self.escalated = true;
                            ctx.alarm(
                                AlarmRequest::new(
                                    Acuity::Crisis,
                                    AlarmCategory::Physiologic,
                                    "ventilator.resume_unconfirmed",
                                    format!("ventilator still paused {} s after resume; restart ventilation now", (now - fired) / 1000),
                                )
                                .citing([status_ref]),
                            );
                        }
                        if self.last_resume_ms.is_none_or(|t| now >= t + self.cfg.resume_ack_ms) {
                            ctx.command(&vent, Command::new("resume"), vec![status_ref], None)?;
                            self.last_resume_ms = Some(now);
                        }
                    }
                    Some(_) => {}
                }
            }
        }

        if let Some(req) = requests.iter().rev().find(|s| s.value("exposure_ms").is_some()) {
            if self.phase == Phase::Idle {
                let exposure_ms = req.value("exposure_ms").unwrap_or(0.0).max(0.0) as u64;
                let pause = pause_for_exposure(exposure_ms, &self.cfg);
                ctx.command(&vent, Command::new("pause").with_duration(pause), vec![req.reference()], None)?;
                self.phase = Phase::AwaitingPause {
                    since_ms: now,
                    exposure_ms,
                    request: req.reference(),
                };
                ctx.rationale(json!({"exposure_ms": exposure_ms, "pause_ms": pause}));
            }
        }

        if let Phase::AwaitingPause {
            since_ms,
            exposure_ms,
            request,
        } = self.phase
        {
            match self.vent_running {
                Some((false, at, status)) if at > since_ms => {
                    if let Some(xray) = ctx.target(DeviceKind::Xray, self.cfg.xray.as_deref()) {
                        ctx.command(&xray, Command::new("expose").with_duration(exposure_ms.max(1)), vec![request, status], None)?;
                    }
                    self.phase = Phase::Idle;
                }
                _ if now >= since_ms + self.cfg.pause_confirm_ms => {
                    ctx.alarm(
                        AlarmRequest::new(
                            Acuity::Caution,
                            AlarmCategory::Technical,
                            "xray.pause_unconfirmed",
                            "ventilator did not confirm pause; exposure cancelled",
                        )
                        .citing([request]),
                    );
                    self.phase = Phase::Idle;
                }
                _ => {}
            }
        }
        ctx.note(match (self.phase, self.paused_since) {
            (Phase::AwaitingPause { .. }, _) => "awaiting pause".to_string(),
            (_, Some((since, _))) => format!("ventilator paused {} s", (now - since) / 1000),
            _ => "ventilating".to_string(),
        });
        Ok(())
    }
}
