//! Fixed bedside insulin protocol, as commonly run by hand.
//!
//! Checks glucose on a fixed schedule and picks one of two insulin rates.
//! Dextrose is only given once a reading below the rescue threshold is seen.
//! There is no trend awareness and no context: this is the baseline the
//! closed-loop controller is compared against.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{latest_with, AppContext, AppError, ClinicalApp};
use crate::bus::DeviceKind;
use crate::devices::Command;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub insulin_pump: Option<String>,
    pub dextrose_pump: Option<String>,
    pub high_threshold: f64,
    pub high_rate: f64,
    pub low_rate: f64,
    pub rescue_threshold: f64,
    /// mg, delivered by the pump over its bolus window.
    pub rescue_bolus_mg: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            insulin_pump: None,
            dextrose_pump: None,
            high_threshold: 140.0,
            high_rate: 6.0,
            low_rate: 2.0,
            rescue_threshold: 40.0,
            rescue_bolus_mg: 2_500.0,
        }
    }
}

pub fn protocol_rate(glucose: f64, cfg: &ProtocolConfig) -> f64 {
    if glucose > cfg.high_threshold {
        cfg.high_rate
    } else {
        cfg.low_rate
    }
}

pub struct InsulinProtocolApp {
    cfg: ProtocolConfig,
    rescued: bool,
}

impl InsulinProtocolApp {
    pub fn new(cfg: ProtocolConfig) -> Self {
        Self { cfg, rescued: false }
    }
}

impl ClinicalApp for InsulinProtocolApp {
    fn step(&mut self, ctx: &mut AppContext<'_>) -> Result<(), AppError> {
        let samples = ctx.take(DeviceKind::Glucometer, "glucose")?;
        let Some((s, g)) = latest_with(&samples, "glucose") else {
            ctx.note("no reading");
            return Ok(());
        };
        let cites = vec![s.reference()];
        if g < self.cfg.rescue_threshold && !self.rescued {
            if let Some(pump) = &self.cfg.dextrose_pump {
                ctx.command(pump, Command::new("bolus").with_arg(self.cfg.rescue_bolus_mg), cites.clone(), None)?;
                self.rescued = true;
            }
        }
        let rate = protocol_rate(g, &self.cfg);
        if let Some(pump) = ctx.target(DeviceKind::InfusionPump, self.cfg.insulin_pump.as_deref()) {
            ctx.command(&pump, Command::new("set_rate").with_arg(rate), cites, None)?;
        }
        ctx.rationale(json!({"glucose": g, "insulin_rate": rate, "rescued": self.rescued}));
        ctx.note(format!("insulin {rate} U/h"));
        Ok(())
    }
}
