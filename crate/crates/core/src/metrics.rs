//! Run metrics, computed from nothing but a verified log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::logger::{require_intact, LogError, LogKind, LogRecord};
use crate::scenario::Expectations;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PauseEpisode {
    pub device: String,
    pub from_ms: u64,
    pub duration_ms: u64,
    /// Still paused when the run ended.
    pub open: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub glucose_min: Option<f64>,
    pub glucose_min_at_ms: Option<u64>,
    pub glucose_max: Option<f64>,
    /// Highest glucose at or after the minimum.
    pub glucose_rebound: Option<f64>,
    /// Fraction of ticks inside the record's target range.
    pub time_in_range: Option<f64>,
    /// Same, ignoring the scenario's settling window.
    pub time_in_range_after_settle: Option<f64>,
    pub spo2_min: Option<f64>,
    pub resp_rate_min: Option<f64>,
    pub alarms_by_acuity: BTreeMap<String, u64>,
    pub time_to_first_crisis_ms: Option<u64>,
    pub lockout_events: u64,
    pub first_lockout_ms: Option<u64>,
    pub ventilator_pauses: Vec<PauseEpisode>,
    pub max_pause_ms: Option<u64>,
    pub commands_issued: u64,
    pub fatality: bool,
    pub fatality_at_ms: Option<u64>,
}

fn f(v: &Value, key: &str) -> Option<f64> {
    v.get(key).and_then(Value::as_f64)
}

fn fold_min(acc: Option<f64>, v: f64) -> Option<f64> {
    Some(acc.map_or(v, |a| a.min(v)))
}

/// Computes metrics over an intact log. A broken chain is an error.
pub fn compute_metrics(records: &[LogRecord]) -> Result<RunMetrics, LogError> {
    require_intact(records)?;
    let mut m = RunMetrics::default();
    let (mut low, mut high, mut settle) = (80.0, 180.0, 0u64);
    let mut glucose: Vec<(u64, f64)> = Vec::new();
    let mut open: BTreeMap<String, u64> = BTreeMap::new();
    let mut last_ms = 0;

    for r in records {
        last_ms = last_ms.max(r.sim_time_ms);
        let p = &r.payload;
        match (r.kind, r.event()) {
            (LogKind::Lifecycle, Some("scenario_started")) => {
                m.scenario = p.get("scenario").and_then(Value::as_str).unwrap_or("").to_string();
                m.seed = p.get("seed").and_then(Value::as_u64).unwrap_or(0);
                settle = p.get("settle_ms").and_then(Value::as_u64).unwrap_or(0);
                if let Some(rec) = p.get("patient_record") {
                    low = f(rec, "target_glucose_low").unwrap_or(low);
                    high = f(rec, "target_glucose_high").unwrap_or(high);
                }
            }
            (LogKind::Lifecycle, Some("physiology")) => {
                let Some(s) = p.get("state") else { continue };
                if let Some(g) = f(s, "glucose") {
                    glucose.push((r.sim_time_ms, g));
                }
                if let Some(v) = f(s, "spo2") {
                    m.spo2_min = fold_min(m.spo2_min, v);
                }
                if let Some(v) = f(s, "resp_rate") {
                    m.resp_rate_min = fold_min(m.resp_rate_min, v);
                }
            }
            (LogKind::Lifecycle, Some("patient_expired")) => {
                if !m.fatality {
                    m.fatality = true;
                    m.fatality_at_ms = Some(r.sim_time_ms);
                }
            }
            (LogKind::Lifecycle, Some("mode_change")) => {
                let kind = p.pointer("/mode/kind").and_then(Value::as_str);
                let to = p.get("to").and_then(Value::as_str);
                let device = p.get("device").and_then(Value::as_str).unwrap_or("").to_string();
                match (kind, to) {
                    (Some("pca"), Some("LOCKED_OUT")) => {
                        m.lockout_events += 1;
                        m.first_lockout_ms.get_or_insert(r.sim_time_ms);
                    }
                    (Some("ventilator"), Some("PAUSED")) => {
                        open.entry(device).or_insert(r.sim_time_ms);
                    }
                    (Some("ventilator"), Some("RUNNING")) => {
                        if let Some(from_ms) = open.remove(&device) {
                            m.ventilator_pauses.push(PauseEpisode {
                                device,
                                from_ms,
                                duration_ms: r.sim_time_ms - from_ms,
                                open: false,
                            });
                        }
                    }
                    _ => {}
                }
            }
            (LogKind::Alarm, Some("raised")) => {
                let acuity = p.get("acuity").and_then(Value::as_str).unwrap_or("?").to_string();
                if acuity == "CRISIS" && m.time_to_first_crisis_ms.is_none() {
                    m.time_to_first_crisis_ms = Some(r.sim_time_ms);
                }
                *m.alarms_by_acuity.entry(acuity).or_default() += 1;
            }
            (LogKind::Command, Some("issued")) => m.commands_issued += 1,
            _ => {}
        }
    }
    for (device, from_ms) in open {
        m.ventilator_pauses.push(PauseEpisode {
            device,
            from_ms,
            duration_ms: last_ms - from_ms,
            open: true,
        });
    }
    m.ventilator_pauses.sort_by_key(|e| e.from_ms);
    m.max_pause_ms = m.ventilator_pauses.iter().map(|e| e.duration_ms).max();
    m.duration_ms = last_ms;

    if let Some(&(t_min, g_min)) = glucose.iter().min_by(|a, b| a.1.total_cmp(&b.1)) {
        m.glucose_min = Some(g_min);
        m.glucose_min_at_ms = Some(t_min);
        m.glucose_max = glucose.iter().map(|g| g.1).max_by(f64::total_cmp);
        m.glucose_rebound = glucose.iter().filter(|g| g.0 >= t_min).map(|g| g.1).max_by(f64::total_cmp);
        let in_range = |gs: &mut dyn Iterator<Item = &(u64, f64)>| {
            let (mut n, mut hit) = (0usize, 0usize);
            for (_, g) in gs {
                n += 1;
                if (low..=high).contains(g) {
                    hit += 1;
                }
            }
            (n > 0).then(|| hit as f64 / n as f64)
        };
        m.time_in_range = in_range(&mut glucose.iter());
        m.time_in_range_after_settle = in_range(&mut glucose.iter().filter(|g| g.0 >= settle));
    }
    Ok(m)
}

/// Which of a scenario's expectations a run fails, as readable messages.
pub fn check_expectations(e: &Expectations, m: &RunMetrics) -> Vec<String> {
    let mut failed = Vec::new();
    let mut check = |ok: bool, what: String| {
        if !ok {
            failed.push(what);
        }
    };
    if let Some(want) = e.fatality {
        check(m.fatality == want, format!("fatality is {}, expected {want}", m.fatality));
    }
    if let Some(x) = e.glucose_min_at_most {
        check(m.glucose_min.is_some_and(|g| g <= x), format!("glucose min {:?} above {x}", m.glucose_min));
    }
    if let Some(x) = e.glucose_min_at_least {
        check(m.glucose_min.is_some_and(|g| g >= x), format!("glucose min {:?} below {x}", m.glucose_min));
    }
    if let Some(x) = e.glucose_rebound_at_least {
        check(m.glucose_rebound.is_some_and(|g| g >= x), format!("glucose rebound {:?} below {x}", m.glucose_rebound));
    }
    if let Some(x) = e.time_in_range_at_least {
        check(
            m.time_in_range_after_settle.is_some_and(|t| t >= x),
            format!("time in range {:?} below {x}", m.time_in_range_after_settle),
        );
    }
    if let Some(x) = e.max_pause_ms_at_most {
        check(m.max_pause_ms.unwrap_or(0) <= x, format!("longest pause {:?} ms above {x}", m.max_pause_ms));
    }
    if let Some(x) = e.lockout_events_at_least {
        check(m.lockout_events >= x, format!("{} lockouts, expected at least {x}", m.lockout_events));
    }
    if let Some(x) = e.lockout_events_at_most {
        check(m.lockout_events <= x, format!("{} lockouts, expected at most {x}", m.lockout_events));
    }
    failed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logger::AuditLog;
    use serde_json::json;

    fn log_with_glucose(values: &[f64]) -> AuditLog {
        let mut log = AuditLog::new();
        log.record(
            0,
            "harness",
            LogKind::Lifecycle,
            json!({"event": "scenario_started", "scenario": "t", "seed": 1,
                   "patient_record": {"target_glucose_low": 80.0, "target_glucose_high": 180.0}}),
        );
        for (i, g) in values.iter().enumerate() {
            log.record(
                i as u64 * 1000,
                "harness",
                LogKind::Lifecycle,
                json!({"event": "physiology", "state": {"glucose": g, "spo2": 97.0, "resp_rate": 14.0}}),
            );
        }
        log
    }

    #[test]
    fn constant_glucose_in_range_is_fully_in_range() {
        let log = log_with_glucose(&[110.0; 50]);
        let m = compute_metrics(log.records()).unwrap();
        assert_eq!(m.time_in_range, Some(1.0));
        assert_eq!(m.glucose_min, Some(110.0));
    }

    #[test]
    fn rebound_is_measured_after_the_trough() {
        let log = log_with_glucose(&[300.0, 150.0, 33.0, 90.0, 210.0, 180.0]);
        let m = compute_metrics(log.records()).unwrap();
        assert_eq!(m.glucose_min, Some(33.0));
        assert_eq!(m.glucose_rebound, Some(210.0));
        assert_eq!(m.glucose_max, Some(300.0));
    }

    #[test]
    fn pauses_are_paired_and_open_ones_run_to_the_end() {
        let mut log = log_with_glucose(&[]);
        let mode = |t: u64, to: &str, log: &mut AuditLog| {
            log.record(
                t,
                "vent-1",
                LogKind::Lifecycle,
                json!({"event": "mode_change", "device": "vent-1", "to": to, "mode": {"kind": "ventilator", "mode": to}}),
            );
        };
        mode(1_000, "PAUSED", &mut log);
        mode(21_000, "RUNNING", &mut log);
        mode(30_000, "PAUSED", &mut log);
        log.record(100_000, "harness", LogKind::Lifecycle, json!({"event": "scenario_ended"}));
        let m = compute_metrics(log.records()).unwrap();
        assert_eq!(m.ventilator_pauses.len(), 2);
        assert_eq!(m.ventilator_pauses[0].duration_ms, 20_000);
        assert!(m.ventilator_pauses[1].open);
        assert_eq!(m.max_pause_ms, Some(70_000));
    }

    #[test]
    fn metrics_are_a_pure_function_of_the_log() {
        let log = log_with_glucose(&[100.0, 200.0, 50.0]);
        assert_eq!(compute_metrics(log.records()).unwrap(), compute_metrics(log.records()).unwrap());
    }

    #[test]
    fn tampered_log_is_rejected() {
        let log = log_with_glucose(&[100.0, 200.0]);
        let mut records = log.into_records();
        records[1].sim_time_ms += 1;
        assert!(matches!(compute_metrics(&records), Err(LogError::IntegrityFailure { .. })));
    }
}
