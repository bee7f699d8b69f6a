//! Contextual vital-sign alarms.
//!
//! Raises physiologic alarms graded by acuity from the latest valid reading
//! of each stream, and a technical alarm when a sensor sends empty payloads.
//! Respiratory causes use the `resp.` prefix so bypass context can mute them.

use serde::{Deserialize, Serialize};

use super::{latest_with, AppContext, AppError, ClinicalApp};
use crate::alarms::{Acuity, AlarmCategory, AlarmRequest};
use crate::bus::{DeviceKind, Sample};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    /// Patient context appended to every alarm, e.g. a known risk.
    pub context: Option<String>,
}

/// One threshold on one field of one stream.
struct Rule {
    kind: DeviceKind,
    field: &'static str,
    below: bool,
    limit: f64,
    acuity: Acuity,
    cause: &'static str,
}

const RULES: &[Rule] = &[
    Rule { kind: DeviceKind::PulseOx, field: "spo2", below: true, limit: 80.0, acuity: Acuity::Crisis, cause: "spo2.critical" },
    Rule { kind: DeviceKind::PulseOx, field: "spo2", below: true, limit: 90.0, acuity: Acuity::Warning, cause: "spo2.low" },
    Rule { kind: DeviceKind::Capnometer, field: "resp_rate", below: true, limit: 1.0, acuity: Acuity::Caution, cause: "resp.apnea" },
    Rule { kind: DeviceKind::Capnometer, field: "resp_rate", below: true, limit: 8.0, acuity: Acuity::Advisory, cause: "resp.rate_low" },
    Rule { kind: DeviceKind::Capnometer, field: "etco2", below: false, limit: 60.0, acuity: Acuity::Caution, cause: "resp.etco2_high" },
    Rule { kind: DeviceKind::Ecg, field: "heart_rate", below: true, limit: 40.0, acuity: Acuity::Crisis, cause: "hr.bradycardia" },
    Rule { kind: DeviceKind::Glucometer, field: "glucose", below: true, limit: 54.0, acuity: Acuity::Crisis, cause: "glucose.severe_low" },
    Rule { kind: DeviceKind::Glucometer, field: "glucose", below: true, limit: 70.0, acuity: Acuity::Warning, cause: "glucose.low" },
    Rule { kind: DeviceKind::Glucometer, field: "glucose", below: false, limit: 250.0, acuity: Acuity::Caution, cause: "glucose.high" },
];

const STREAMS: &[(DeviceKind, &str)] = &[
    (DeviceKind::PulseOx, "spo2"),
    (DeviceKind::Capnometer, "etco2"),
    (DeviceKind::Ecg, "hr"),
    (DeviceKind::Glucometer, "glucose"),
];

/// Most severe rule breached by a reading of `field` (rules are ordered
/// most severe first within each field and direction).
fn breached(kind: DeviceKind, field: &str, value: f64) -> Vec<&'static Rule> {
    let mut hits: Vec<&Rule> = Vec::new();
    for r in RULES.iter().filter(|r| r.kind == kind && r.field == field) {
        let hit = if r.below { value < r.limit } else { value > r.limit };
        if hit && !hits.iter().any(|h| h.below == r.below) {
            hits.push(r);
        }
    }
    hits
}

pub struct MonitorApp {
    cfg: MonitorConfig,
}

impl MonitorApp {
    pub fn new(cfg: MonitorConfig) -> Self {
        Self { cfg }
    }

    fn detail(&self, text: String) -> String {
        match &self.cfg.context {
            Some(c) => format!("{text}; {c}"),
            None => text,
        }
    }

    fn check(&self, ctx: &mut AppContext<'_>, kind: DeviceKind, samples: &[Sample]) {
        if samples.iter().any(|s| s.payload.is_empty()) {
            ctx.alarm(AlarmRequest::new(
                Acuity::Caution,
                AlarmCategory::Technical,
                format!("sensor.null_data.{}", kind.topic_segment()),
                self.detail(format!("{} is sending empty readings", kind.topic_segment())),
            ));
        }
        let fields: Vec<&str> = RULES.iter().filter(|r| r.kind == kind).map(|r| r.field).collect();
        let mut seen = Vec::new();
        for f in fields {
            if seen.contains(&f) {
                continue;
            }
            seen.push(f);
            let Some((s, v)) = latest_with(samples, f) else {
                continue;
            };
            for rule in breached(kind, f, v) {
                ctx.alarm(
                    AlarmRequest::new(
                        rule.acuity,
                        AlarmCategory::Physiologic,
                        rule.cause,
                        self.detail(format!("{f} {v:.1} {} {}", if rule.below { "below" } else { "above" }, rule.limit)),
                    )
                    .citing([s.reference()]),
                );
            }
        }
    }
}

impl ClinicalApp for MonitorApp {
    fn step(&mut self, ctx: &mut AppContext<'_>) -> Result<(), AppError> {
        for (kind, stream) in STREAMS {
            if ctx.devices_of(*kind).is_empty() {
                continue;
            }
            let samples = ctx.take(*kind, stream)?;
            self.check(ctx, *kind, &samples);
        }
        ctx.note("monitoring");
        Ok(())
    }
}
