//! Physiologic closed-loop insulin control with dextrose rescue.
//!
//! Proportional only. Targets, basal rate, correction factor and the rate
//! ceiling come from the patient record; outside the authority bounds the
//! loop stops and hands control back to a clinician.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{latest_with, AppContext, AppError, ClinicalApp, Directive, Reading};
use crate::alarms::{Acuity, AlarmCategory, AlarmRequest};
use crate::bus::DeviceKind;
use crate::devices::Command;
use crate::patient::PatientRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PclcConfig {
    pub insulin_pump: Option<String>,
    pub dextrose_pump: Option<String>,
    /// mg/min while rescuing.
    pub rescue_dextrose_rate: f64,
    /// Oldest usable glucose reading. Defaults to two glucometer periods.
    pub stale_ms: u64,
    pub authority_low: f64,
    pub authority_high: f64,
}

impl Default for PclcConfig {
    fn default() -> Self {
        Self {
            insulin_pump: None,
            dextrose_pump: None,
            rescue_dextrose_rate: 15.0,
            stale_ms: 120_000,
            authority_low: 54.0,
            authority_high: 300.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Low,
    InRange,
    High,
    Clamped,
    BelowAuthority,
    AboveAuthority,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PclcLaw {
    pub regime: Regime,
    /// U/hr
    pub insulin_rate: f64,
    /// mg/min
    pub dextrose_rate: f64,
}

/// The control law for one glucose reading.
pub fn pclc_law(glucose: f64, record: &PatientRecord, cfg: &PclcConfig) -> PclcLaw {
    let rescue = PclcLaw {
        regime: Regime::Low,
        insulin_rate: 0.0,
        dextrose_rate: cfg.rescue_dextrose_rate,
    };
    if glucose < cfg.authority_low {
        return PclcLaw {
            regime: Regime::BelowAuthority,
            ..rescue
        };
    }
    if glucose > cfg.authority_high {
        return PclcLaw {
            regime: Regime::AboveAuthority,
            insulin_rate: record.max_insulin_rate,
            dextrose_rate: 0.0,
        };
    }
    if glucose < record.target_glucose_low {
        return rescue;
    }
    if glucose <= record.target_glucose_high {
        return PclcLaw {
            regime: Regime::InRange,
            insulin_rate: record.basal_insulin_rate,
            dextrose_rate: 0.0,
        };
    }
    let wanted = record.basal_insulin_rate + (glucose - record.target_glucose_high) / record.correction_factor;
    let clamped = wanted > record.max_insulin_rate;
    PclcLaw {
        regime: if clamped { Regime::Clamped } else { Regime::High },
        insulin_rate: wanted.min(record.max_insulin_rate),
        dextrose_rate: 0.0,
    }
}

pub struct PclcApp {
    cfg: PclcConfig,
    record: PatientRecord,
    glucose: Option<Reading>,
    started_ms: Option<u64>,
    held: bool,
    stopped: Option<&'static str>,
    last_regime: Option<Regime>,
}

impl PclcApp {
    pub fn new(cfg: PclcConfig, record: PatientRecord) -> Self {
        Self {
            cfg,
            record,
            glucose: None,
            started_ms: None,
            held: false,
            stopped: None,
            last_regime: None,
        }
    }

    fn stop(&mut self, ctx: &mut AppContext<'_>, reason: &'static str, alarm: AlarmRequest) {
        self.stopped = Some(reason);
        ctx.alarm(alarm);
        ctx.note(format!("STOPPED: {reason}"));
    }
}

impl ClinicalApp for PclcApp {
    fn step(&mut self, ctx: &mut AppContext<'_>) -> Result<(), AppError> {
        let now = ctx.now_ms;
        self.started_ms.get_or_insert(now);
        let samples = ctx.take(DeviceKind::Glucometer, "glucose")?;
        if let Some((s, g)) = latest_with(&samples, "glucose") {
            self.glucose = Some(Reading::from_sample(s, g));
        }
        let insulin_pump = ctx.target(DeviceKind::InfusionPump, self.cfg.insulin_pump.as_deref());

        for o in std::mem::take(&mut ctx.overrides) {
            match o.directive {
                Directive::HoldAutomation => self.held = true,
                Directive::ResumeAutomation => {
                    self.held = false;
                    self.stopped = None;
                    self.last_regime = None;
                }
                Directive::SetManualRate { rate } => {
                    self.held = true;
                    if let Some(pump) = &insulin_pump {
                        ctx.command(pump, Command::new("set_rate").with_arg(rate), vec![], Some(o.seq))?;
                    }
                }
                _ => {}
            }
        }
        if self.held {
            ctx.note("HELD");
            return Ok(());
        }
        if let Some(reason) = self.stopped {
            ctx.note(format!("STOPPED: {reason}"));
            return Ok(());
        }

        let age = match self.glucose {
            Some(r) => r.age(now),
            None => now - self.started_ms.unwrap_or(now),
        };
        if age > self.cfg.stale_ms {
            let evidence = self.glucose.map(|r| r.source);
            self.stop(
                ctx,
                "stale glucose",
                AlarmRequest::new(
                    Acuity::Crisis,
                    AlarmCategory::Technical,
                    "glucose.stale",
                    format!("no valid glucose for {} s; automation stopped", age / 1000),
                )
                .citing(evidence),
            );
            return Ok(());
        }
        let Some(reading) = self.glucose else {
            ctx.note("awaiting glucose");
            return Ok(());
        };
        let law = pclc_law(reading.value, &self.record, &self.cfg);
        ctx.rationale(json!({"glucose": reading.value, "age_ms": age, "law": law}));
        let cites = vec![reading.source];
        let dextrose_pump = self.cfg.dextrose_pump.clone();

        match law.regime {
            Regime::BelowAuthority => {
                // fail safe before handing back: insulin off, dextrose on
                if let Some(pump) = &insulin_pump {
                    ctx.command(pump, Command::new("set_rate").with_arg(0.0), cites.clone(), None)?;
                }
                if let Some(pump) = &dextrose_pump {
                    ctx.command(pump, Command::new("set_rate").with_arg(law.dextrose_rate), cites.clone(), None)?;
                }
                self.stop(
                    ctx,
                    "glucose below authority",
                    AlarmRequest::new(
                        Acuity::Crisis,
                        AlarmCategory::Physiologic,
                        "glucose.out_of_authority",
                        format!("glucose {:.0} mg/dl below {:.0}; clinician needed", reading.value, self.cfg.authority_low),
                    )
                    .citing(cites),
                );
                return Ok(());
            }
            Regime::AboveAuthority => {
                self.stop(
                    ctx,
                    "glucose above authority",
                    AlarmRequest::new(
                        Acuity::Crisis,
                        AlarmCategory::Physiologic,
                        "glucose.out_of_authority",
                        format!("glucose {:.0} mg/dl above {:.0}; clinician needed", reading.value, self.cfg.authority_high),
                    )
                    .citing(cites),
                );
                return Ok(());
            }
            _ => {}
        }

        if let Some(pump) = &insulin_pump {
            ctx.command(pump, Command::new("set_rate").with_arg(law.insulin_rate), cites.clone(), None)?;
        }
        if let Some(pump) = &dextrose_pump {
            ctx.command(pump, Command::new("set_rate").with_arg(law.dextrose_rate), cites.clone(), None)?;
        }
        let entered = self.last_regime != Some(law.regime);
        self.last_regime = Some(law.regime);
        if entered {
            match law.regime {
                Regime::Low => ctx.alarm(
                    AlarmRequest::new(
                        Acuity::Caution,
                        AlarmCategory::Physiologic,
                        "glucose.low",
                        format!("glucose {:.0} mg/dl; insulin stopped, dextrose rescue running", reading.value),
                    )
                    .citing(cites),
                ),
                Regime::Clamped => ctx.alarm(
                    AlarmRequest::new(
                        Acuity::Warning,
                        AlarmCategory::Physiologic,
                        "glucose.insulin_at_max",
                        format!("glucose {:.0} mg/dl; insulin held at {:.1} U/h ceiling", reading.value, law.insulin_rate),
                    )
                    .citing(cites),
                ),
                _ => {}
            }
        }
        ctx.note(format!("{:?} insulin {:.2} U/h", law.regime, law.insulin_rate));
        Ok(())
    }
}
