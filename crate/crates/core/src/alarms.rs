//! Acuity-based contextual alarms with coalescing and context suppression.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::SampleRef;

/// Repeats of the same (source, cause, acuity) inside this window are folded
/// into the existing alarm.
pub const COALESCE_WINDOW_MS: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Acuity {
    Advisory,
    Caution,
    Warning,
    Crisis,
}

impl Acuity {
    pub fn as_str(self) -> &'static str {
        match self {
            Acuity::Advisory => "ADVISORY",
            Acuity::Caution => "CAUTION",
            Acuity::Warning => "WARNING",
            Acuity::Crisis => "CRISIS",
        }
    }

    pub fn code(self) -> f64 {
        self as u8 as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlarmCategory {
    /// Something is wrong with the patient.
    Physiologic,
    /// Something is wrong with the equipment or the data.
    Technical,
}

/// What an app asks to raise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmRequest {
    pub acuity: Acuity,
    pub category: AlarmCategory,
    /// Machine-readable cause, e.g. `resp.rate_low`.
    pub cause: String,
    /// Human-readable context for the console.
    pub detail: String,
    #[serde(default)]
    pub evidence: Vec<SampleRef>,
}

impl AlarmRequest {
    pub fn new(acuity: Acuity, category: AlarmCategory, cause: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            acuity,
            category,
            cause: cause.into(),
            detail: detail.into(),
            evidence: Vec::new(),
        }
    }

    pub fn citing(mut self, evidence: impl IntoIterator<Item = SampleRef>) -> Self {
        self.evidence.extend(evidence);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub alarm_id: u64,
    pub source_app: String,
    pub acuity: Acuity,
    pub category: AlarmCategory,
    pub cause: String,
    pub detail: String,
    pub evidence: Vec<SampleRef>,
    pub raised_ms: u64,
    pub last_raised_ms: u64,
    pub count: u32,
    pub suppressed: bool,
    pub acked_by: Option<String>,
    pub acked_ms: Option<u64>,
}

/// Context rule that hides low-acuity alarms whose cause starts with one of
/// the prefixes. CRISIS is never hidden.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suppression {
    pub cause_prefixes: Vec<String>,
    pub max_acuity: Acuity,
    pub reason: String,
}

impl Suppression {
    pub fn covers(&self, req: &AlarmRequest) -> bool {
        req.acuity != Acuity::Crisis
            && req.acuity <= self.max_acuity
            && self.cause_prefixes.iter().any(|p| req.cause.starts_with(p.as_str()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RaiseOutcome {
    Raised(u64),
    Coalesced(u64),
    Suppressed(u64),
}

impl RaiseOutcome {
    pub fn alarm_id(self) -> u64 {
        match self {
            RaiseOutcome::Raised(id) | RaiseOutcome::Coalesced(id) | RaiseOutcome::Suppressed(id) => id,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlarmError {
    #[error("unknown alarm {0}")]
    UnknownAlarm(u64),
}

#[derive(Clone, Debug, Default)]
pub struct AlarmManager {
    alarms: Vec<Alarm>,
    suppressions: BTreeMap<String, Suppression>,
}

impl AlarmManager {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs or clears the suppression owned by `owner`.
    pub fn set_suppression(&mut self, owner: &str, rule: Option<Suppression>) {
        match rule {
            Some(r) => {
                self.suppressions.insert(owner.to_string(), r);
            }
            None => {
                self.suppressions.remove(owner);
            }
        }
    }

    pub fn suppression(&self, owner: &str) -> Option<&Suppression> {
        self.suppressions.get(owner)
    }

    fn suppressed(&self, req: &AlarmRequest) -> bool {
        self.suppressions.values().any(|s| s.covers(req))
    }

    pub fn raise(&mut self, source: &str, req: AlarmRequest, now_ms: u64) -> RaiseOutcome {
        let suppressed = self.suppressed(&req);
        if let Some(existing) = self.alarms.iter_mut().rev().find(|a| {
            a.source_app == source
                && a.cause == req.cause
                && a.acuity == req.acuity
                && a.suppressed == suppressed
                && now_ms.saturating_sub(a.last_raised_ms) <= COALESCE_WINDOW_MS
        }) {
            existing.count += 1;
            existing.last_raised_ms = now_ms;
            return RaiseOutcome::Coalesced(existing.alarm_id);
        }
        let alarm_id = self.alarms.len() as u64 + 1;
        self.alarms.push(Alarm {
            alarm_id,
            source_app: source.to_string(),
            acuity: req.acuity,
            category: req.category,
            cause: req.cause,
            detail: req.detail,
            evidence: req.evidence,
            raised_ms: now_ms,
            last_raised_ms: now_ms,
            count: 1,
            suppressed,
            acked_by: None,
            acked_ms: None,
        });
        if suppressed {
            RaiseOutcome::Suppressed(alarm_id)
        } else {
            RaiseOutcome::Raised(alarm_id)
        }
    }

    pub fn ack(&mut self, alarm_id: u64, clinician: &str, now_ms: u64) -> Result<&Alarm, AlarmError> {
        let a = self
            .alarms
            .iter_mut()
            .find(|a| a.alarm_id == alarm_id)
            .ok_or(AlarmError::UnknownAlarm(alarm_id))?;
        a.acked_by = Some(clinician.to_string());
        a.acked_ms = Some(now_ms);
        Ok(a)
    }

    pub fn get(&self, alarm_id: u64) -> Option<&Alarm> {
        self.alarms.iter().find(|a| a.alarm_id == alarm_id)
    }

    /// Full history including suppressed and acknowledged alarms.
    pub fn history(&self) -> &[Alarm] {
        &self.alarms
    }

    /// Alarms a clinician should see, highest acuity first, newest first.
    pub fn surfaced(&self) -> Vec<&Alarm> {
        let mut out: Vec<&Alarm> = self.alarms.iter().filter(|a| !a.suppressed).collect();
        out.sort_by(|a, b| b.acuity.cmp(&a.acuity).then(b.raised_ms.cmp(&a.raised_ms)));
        out
    }

    pub fn unacked(&self) -> impl Iterator<Item = &Alarm> {
        self.alarms.iter().filter(|a| !a.suppressed && a.acked_by.is_none())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(acuity: Acuity) -> AlarmRequest {
        AlarmRequest::new(acuity, AlarmCategory::Physiologic, "resp.rate_low", "RR 6/min")
    }

    fn cpb_rule() -> Suppression {
        Suppression {
            cause_prefixes: vec!["resp.".into()],
            max_acuity: Acuity::Caution,
            reason: "on bypass".into(),
        }
    }

    #[test]
    fn duplicates_within_window_coalesce() {
        let mut m = AlarmManager::new();
        let a = m.raise("monitor", resp(Acuity::Caution), 0);
        let b = m.raise("monitor", resp(Acuity::Caution), 9_000);
        assert_eq!(a, RaiseOutcome::Raised(1));
        assert_eq!(b, RaiseOutcome::Coalesced(1));
        assert_eq!(m.get(1).unwrap().count, 2);
        // window slides with each repeat
        assert_eq!(m.raise("monitor", resp(Acuity::Caution), 18_000), RaiseOutcome::Coalesced(1));
        assert_eq!(m.raise("monitor", resp(Acuity::Caution), 40_000), RaiseOutcome::Raised(2));
    }

    #[test]
    fn different_acuity_is_a_new_alarm() {
        let mut m = AlarmManager::new();
        m.raise("monitor", resp(Acuity::Caution), 0);
        assert_eq!(m.raise("monitor", resp(Acuity::Warning), 1_000), RaiseOutcome::Raised(2));
    }

    #[test]
    fn suppression_hides_low_acuity_respiratory_alarms() {
        let mut m = AlarmManager::new();
        m.set_suppression("cpb", Some(cpb_rule()));
        assert_eq!(m.raise("monitor", resp(Acuity::Advisory), 0), RaiseOutcome::Suppressed(1));
        assert!(m.surfaced().is_empty());
        assert_eq!(m.history().len(), 1);
        assert!(matches!(m.raise("monitor", resp(Acuity::Warning), 0), RaiseOutcome::Raised(_)));
        let spo2 = AlarmRequest::new(Acuity::Advisory, AlarmCategory::Physiologic, "spo2_low", "");
        assert!(matches!(m.raise("monitor", spo2, 0), RaiseOutcome::Raised(_)));
    }

    #[test]
    fn crisis_is_never_suppressed() {
        let mut m = AlarmManager::new();
        m.set_suppression(
            "cpb",
            Some(Suppression {
                max_acuity: Acuity::Crisis,
                ..cpb_rule()
            }),
        );
        assert!(matches!(m.raise("monitor", resp(Acuity::Crisis), 0), RaiseOutcome::Raised(_)));
    }

    #[test]
    fn clearing_suppression_resurfaces_new_alarms() {
        let mut m = AlarmManager::new();
        m.set_suppression("cpb", Some(cpb_rule()));
        m.raise("monitor", resp(Acuity::Caution), 0);
        m.set_suppression("cpb", None);
        assert_eq!(m.raise("monitor", resp(Acuity::Caution), 1_000), RaiseOutcome::Raised(2));
    }

    #[test]
    fn ack_records_identity_and_keeps_history() {
        let mut m = AlarmManager::new();
        let id = m.raise("pca", resp(Acuity::Crisis), 0).alarm_id();
        let a = m.ack(id, "dr-lee", 5_000).unwrap();
        assert_eq!(a.acked_by.as_deref(), Some("dr-lee"));
        assert_eq!(m.history().len(), 1);
        assert_eq!(m.unacked().count(), 0);
        assert_eq!(m.ack(99, "dr-lee", 0), Err(AlarmError::UnknownAlarm(99)));
    }

    #[test]
    fn surfaced_orders_by_acuity() {
        let mut m = AlarmManager::new();
        m.raise("a", resp(Acuity::Advisory), 0);
        m.raise("b", resp(Acuity::Crisis), 0);
        m.raise("c", resp(Acuity::Warning), 0);
        let order: Vec<Acuity> = m.surfaced().iter().map(|a| a.acuity).collect();
        assert_eq!(order, vec![Acuity::Crisis, Acuity::Warning, Acuity::Advisory]);
    }
}
