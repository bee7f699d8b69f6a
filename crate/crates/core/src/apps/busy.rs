//! Adversarial app that spins on the bus every period.

use serde::{Deserialize, Serialize};

use super::{AppContext, AppError, ClinicalApp};
use crate::bus::DeviceKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BusyLoopConfig {
    pub device_kind: DeviceKind,
    pub stream: String,
    /// Operations attempted per period.
    pub spin: u32,
}

impl Default for BusyLoopConfig {
    fn default() -> Self {
        Self {
            device_kind: DeviceKind::PulseOx,
            stream: "spo2".into(),
            spin: 10_000,
        }
    }
}

pub struct BusyLoopApp {
    cfg: BusyLoopConfig,
}

impl BusyLoopApp {
    pub fn new(cfg: BusyLoopConfig) -> Self {
        Self { cfg }
    }
}

impl ClinicalApp for BusyLoopApp {
    fn step(&mut self, ctx: &mut AppContext<'_>) -> Result<(), AppError> {
        for _ in 0..self.cfg.spin {
            ctx.take(self.cfg.device_kind, &self.cfg.stream)?;
        }
        Ok(())
    }
}
