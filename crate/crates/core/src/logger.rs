//! Tamper-evident data logger.
//!
//! Every record is chained onto its predecessor:
//!
//! ```text
//! this_hash = SHA-256(prev_hash || canonical(seq, sim_time_ms, actor, kind, payload))
//! ```
//!
//! where `canonical` is the compact JSON encoding of the five-element array
//! (object keys sorted) and the first record's `prev_hash` is
//! `SHA-256("ICE-GENESIS")`. On disk a log is newline-delimited JSON, one
//! record per line, hashes hex-encoded (`.icelog`).

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const GENESIS: &str = "ICE-GENESIS";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("integrity failure: chain diverges at seq {first_bad_seq}")]
    IntegrityFailure { first_bad_seq: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LogKind {
    SamplePublished,
    SampleDelivered,
    Command,
    Alarm,
    Override,
    Security,
    Lifecycle,
    Fault,
}

impl LogKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LogKind::SamplePublished => "SAMPLE_PUBLISHED",
            LogKind::SampleDelivered => "SAMPLE_DELIVERED",
            LogKind::Command => "COMMAND",
            LogKind::Alarm => "ALARM",
            LogKind::Override => "OVERRIDE",
            LogKind::Security => "SECURITY",
            LogKind::Lifecycle => "LIFECYCLE",
            LogKind::Fault => "FAULT",
        }
    }
}

/// An event before it has been sequenced and chained.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEvent {
    pub sim_time_ms: u64,
    pub actor: String,
    pub kind: LogKind,
    pub payload: Value,
}

impl LogEvent {
    pub fn new(sim_time_ms: u64, actor: impl Into<String>, kind: LogKind, payload: Value) -> Self {
        Self {
            sim_time_ms,
            actor: actor.into(),
            kind,
            payload,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub seq: u64,
    pub sim_time_ms: u64,
    pub actor: String,
    pub kind: LogKind,
    pub payload: Value,
    pub prev_hash: String,
    pub this_hash: String,
}

impl LogRecord {
    /// Payload field `event`, which most records carry as a discriminator.
    pub fn event(&self) -> Option<&str> {
        self.payload.get("event").and_then(Value::as_str)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

pub fn genesis_hash() -> [u8; 32] {
    Sha256::digest(GENESIS.as_bytes()).into()
}

fn canonical_bytes(seq: u64, sim_time_ms: u64, actor: &str, kind: LogKind, payload: &Value) -> Vec<u8> {
    // serde_json's default map is a BTreeMap, so object keys come out sorted.
    serde_json::to_vec(&json!([seq, sim_time_ms, actor, kind, payload])).expect("canonical encoding")
}

fn chain_hash(prev: &[u8; 32], canonical: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(prev);
    hasher.update(canonical);
    hasher.finalize().into()
}

/// Append-only, hash-chained event log held in memory.
#[derive(Clone, Debug)]
pub struct AuditLog {
    records: Vec<LogRecord>,
    head: [u8; 32],
}

impl Default for AuditLog {
    fn default() -> Self {
        Self::new()
    }
}

impl AuditLog {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            head: genesis_hash(),
        }
    }

    pub fn append(&mut self, event: LogEvent) -> &LogRecord {
        let seq = self.records.len() as u64 + 1;
        let canonical = canonical_bytes(seq, event.sim_time_ms, &event.actor, event.kind, &event.payload);
        let this = chain_hash(&self.head, &canonical);
        let record = LogRecord {
            seq,
            sim_time_ms: event.sim_time_ms,
            actor: event.actor,
            kind: event.kind,
            payload: event.payload,
            prev_hash: hex::encode(self.head),
            this_hash: hex::encode(this),
        };
        self.head = this;
        self.records.push(record);
        self.records.last().expect("just pushed")
    }

    /// Convenience form of [`AuditLog::append`] returning the assigned seq.
    pub fn record(&mut self, sim_time_ms: u64, actor: impl Into<String>, kind: LogKind, payload: Value) -> u64 {
        self.append(LogEvent::new(sim_time_ms, actor, kind, payload)).seq
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn head_hash(&self) -> String {
        hex::encode(self.head)
    }

    pub fn into_records(self) -> Vec<LogRecord> {
        self.records
    }

    /// Writes the log as newline-delimited JSON.
    pub fn write_to(&self, path: &Path) -> Result<(), LogError> {
        write_records(&self.records, path)
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 256);
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }
}

pub fn write_records(records: &[LogRecord], path: &Path) -> Result<(), LogError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses one record. The line must be byte-identical to the record's own
/// serialization, so edits that leave the decoded values unchanged (an extra
/// float digit, reordered keys, whitespace) are still refused.
pub fn parse_line(line: &str, line_no: usize) -> Result<LogRecord, LogError> {
    let r: LogRecord = serde_json::from_str(line).map_err(|e| LogError::MalformedRecord {
        line: line_no,
        reason: e.to_string(),
    })?;
    if r.to_line() != line {
        return Err(LogError::MalformedRecord {
            line: line_no,
            reason: "record is not in canonical encoding".into(),
        });
    }
    Ok(r)
}

/// Parses an `.icelog` stream. Blank lines are skipped.
pub fn parse_ndjson(text: &str) -> Result<Vec<LogRecord>, LogError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, LogError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LogError::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainStatus {
    Ok,
    FirstBad(u64),
}

/// Recomputes every link of the chain.
///
/// Reports the first seq whose stored hashes or numbering disagree with the
/// recomputation. Hashes must match in their canonical lowercase hex form. A
/// truncated tail still verifies: only a prefix is checked.
pub fn verify_chain(records: &[LogRecord]) -> Result<ChainStatus, LogError> {
    let mut head = genesis_hash();
    for (i, r) in records.iter().enumerate() {
        let expected_seq = i as u64 + 1;
        if r.seq != expected_seq {
            return Ok(ChainStatus::FirstBad(expected_seq));
        }
        if r.prev_hash != hex::encode(head) {
            return Ok(ChainStatus::FirstBad(r.seq));
        }
        let canonical = canonical_bytes(r.seq, r.sim_time_ms, &r.actor, r.kind, &r.payload);
        let this = chain_hash(&head, &canonical);
        if r.this_hash != hex::encode(this) {
            return Ok(ChainStatus::FirstBad(r.seq));
        }
        head = this;
    }
    Ok(ChainStatus::Ok)
}

/// Fails with `IntegrityFailure` unless the whole slice verifies.
pub fn require_intact(records: &[LogRecord]) -> Result<(), LogError> {
    match verify_chain(records)? {
        ChainStatus::Ok => Ok(()),
        ChainStatus::FirstBad(first_bad_seq) => Err(LogError::IntegrityFailure { first_bad_seq }),
    }
}

#[derive(Clone, Debug, Default)]
pub struct TimelineFilter {
    pub from_ms: Option<u64>,
    pub to_ms: Option<u64>,
    pub actor: Option<String>,
    pub patient: Option<String>,
}

impl TimelineFilter {
    pub fn matches(&self, r: &LogRecord) -> bool {
        if self.from_ms.is_some_and(|f| r.sim_time_ms < f) || self.to_ms.is_some_and(|t| r.sim_time_ms > t) {
            return false;
        }
        if let Some(actor) = &self.actor {
            if &r.actor != actor {
                return false;
            }
        }
        if let Some(patient) = &self.patient {
            let by_key = r
                .payload
                .get("instance_key")
                .and_then(Value::as_str)
                .is_some_and(|k| k.rsplit('@').next() == Some(patient.as_str()));
            let by_field = r.payload.get("patient_id").and_then(Value::as_str) == Some(patient.as_str());
            if !(by_key || by_field) {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimelineEntry {
    pub seq: u64,
    pub sim_time_ms: u64,
    pub actor: String,
    pub kind: LogKind,
    pub text: String,
}

pub fn format_sim_time(ms: u64) -> String {
    let s = ms / 1000;
    format!("{:02}:{:02}:{:02}.{:03}", s / 3600, (s / 60) % 60, s % 60, ms % 1000)
}

fn render(r: &LogRecord) -> String {
    let p = &r.payload;
    let mut text = String::new();
    let event = r.event().unwrap_or("");
    match r.kind {
        LogKind::SamplePublished | LogKind::SampleDelivered => {
            let topic = p.get("topic").and_then(Value::as_str).unwrap_or("?");
            let writer = p.get("writer").and_then(Value::as_str).unwrap_or("?");
            let seq = p.get("seq").and_then(Value::as_u64).unwrap_or(0);
            let _ = write!(text, "{topic} {writer}#{seq}");
            if let Some(data) = p.get("data").and_then(Value::as_object) {
                for (k, v) in data {
                    let value = v.get("value").and_then(Value::as_f64);
                    let unit = v.get("unit").and_then(Value::as_str).unwrap_or("");
                    if let Some(value) = value {
                        let _ = write!(text, " {k}={value:.1}{unit}");
                    }
                }
            }
        }
        LogKind::Command => {
            let verb = p.get("verb").and_then(Value::as_str).unwrap_or("?");
            let device = p.get("device").and_then(Value::as_str).unwrap_or("?");
            let _ = write!(text, "{event} {verb} -> {device}");
            if let Some(arg) = p.get("arg").and_then(Value::as_f64) {
                let _ = write!(text, " ({arg})");
            }
            if let Some(cites) = p.get("cites").and_then(Value::as_array) {
                let _ = write!(text, " citing {} samples", cites.len());
            }
            if let Some(reason) = p.get("reason").and_then(Value::as_str) {
                let _ = write!(text, " [{reason}]");
            }
        }
        LogKind::Alarm => {
            let acuity = p.get("acuity").and_then(Value::as_str).unwrap_or("?");
            let cause = p.get("cause").and_then(Value::as_str).unwrap_or("?");
            let detail = p.get("detail").and_then(Value::as_str).unwrap_or("");
            let _ = write!(text, "{event} {acuity} {cause}: {detail}");
        }
        _ => {
            let _ = write!(text, "{event} {}", p);
        }
    }
    text
}

/// Rebuilds a human-readable, seq-ordered timeline from a verified log.
///
/// The chain is verified over the prefix that covers every selected record;
/// damage after the last selected record does not affect the result.
pub fn reconstruct(records: &[LogRecord], filter: &TimelineFilter) -> Result<Vec<TimelineEntry>, LogError> {
    let selected: Vec<&LogRecord> = records.iter().filter(|r| filter.matches(r)).collect();
    let Some(last) = selected.last() else {
        return Ok(Vec::new());
    };
    let cover = records
        .iter()
        .position(|r| std::ptr::eq(r, *last))
        .map(|i| i + 1)
        .unwrap_or(records.len());
    require_intact(&records[..cover])?;
    Ok(selected
        .into_iter()
        .map(|r| TimelineEntry {
            seq: r.seq,
            sim_time_ms: r.sim_time_ms,
            actor: r.actor.clone(),
            kind: r.kind,
            text: render(r),
        })
        .collect())
}

impl std::fmt::Display for TimelineEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:>7} {} {:<16} {:<20} {}",
            self.seq,
            format_sim_time(self.sim_time_ms),
            self.kind.as_str(),
            self.actor,
            self.text
        )
    }
}

/// A command whose cited sample is missing or logged after the command.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CitationViolation {
    pub command_seq: u64,
    pub writer: String,
    pub sample_seq: u64,
}

/// Checks that every issued command's cited samples were published (and, when
/// `require_delivery` is set, delivered to the issuing actor) earlier in the
/// log.
pub fn check_citations(records: &[LogRecord], require_delivery: bool) -> Vec<CitationViolation> {
    use std::collections::HashMap;
    let mut published: HashMap<(String, u64), u64> = HashMap::new();
    let mut delivered: HashMap<(String, String, u64), u64> = HashMap::new();
    let mut bad = Vec::new();
    for r in records {
        match r.kind {
            LogKind::SamplePublished | LogKind::SampleDelivered => {
                let (Some(w), Some(s)) = (
                    r.payload.get("writer").and_then(Value::as_str),
                    r.payload.get("seq").and_then(Value::as_u64),
                ) else {
                    continue;
                };
                if r.kind == LogKind::SamplePublished {
                    published.entry((w.to_string(), s)).or_insert(r.seq);
                } else {
                    delivered.entry((r.actor.clone(), w.to_string(), s)).or_insert(r.seq);
                }
            }
            LogKind::Command if r.event() == Some("issued") => {
                let Some(cites) = r.payload.get("cites").and_then(Value::as_array) else {
                    continue;
                };
                for c in cites {
                    let w = c.get("writer").and_then(Value::as_str).unwrap_or("").to_string();
                    let s = c.get("seq").and_then(Value::as_u64).unwrap_or(0);
                    let ok = published.contains_key(&(w.clone(), s))
                        && (!require_delivery || delivered.contains_key(&(r.actor.clone(), w.clone(), s)));
                    if !ok {
                        bad.push(CitationViolation {
                            command_seq: r.seq,
                            writer: w,
                            sample_seq: s,
                        });
                    }
                }
            }
            _ => {}
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_log(n: usize) -> AuditLog {
        let mut log = AuditLog::new();
        for i in 0..n {
            log.record(
                i as u64 * 10,
                format!("dev-{}", i % 3),
                LogKind::SamplePublished,
                json!({"topic": "device/pulse_ox/po-1/spo2", "writer": "w1", "seq": i + 1, "data": {"spo2": {"value": 97.5, "unit": "%"}}}),
            );
        }
        log
    }

    #[test]
    fn first_append_chains_from_genesis() {
        let mut log = AuditLog::new();
        let r = log.append(LogEvent::new(0, "bus", LogKind::Lifecycle, json!({"event": "start"})));
        assert_eq!(r.seq, 1);
        assert_eq!(r.prev_hash, hex::encode(Sha256::digest(b"ICE-GENESIS")));
    }

    #[test]
    fn consecutive_records_link() {
        let log = sample_log(2);
        let rs = log.records();
        assert_eq!((rs[0].seq, rs[1].seq), (1, 2));
        assert_eq!(rs[1].prev_hash, rs[0].this_hash);
    }

    #[test]
    fn payload_mutation_is_located() {
        let log = sample_log(100);
        let mut rs = log.into_records();
        rs[56].payload["data"]["spo2"]["value"] = json!(12.5);
        assert_eq!(verify_chain(&rs).unwrap(), ChainStatus::FirstBad(57));
    }

    #[test]
    fn truncated_prefix_still_verifies() {
        let log = sample_log(50);
        assert_eq!(verify_chain(&log.records()[..20]).unwrap(), ChainStatus::Ok);
    }

    #[test]
    fn seq_gap_is_reported() {
        let mut rs = sample_log(10).into_records();
        rs.remove(4);
        assert_eq!(verify_chain(&rs).unwrap(), ChainStatus::FirstBad(5));
    }

    #[test]
    fn bad_hex_is_a_broken_link() {
        let mut rs = sample_log(3).into_records();
        rs[1].this_hash = "zz".into();
        assert_eq!(verify_chain(&rs).unwrap(), ChainStatus::FirstBad(2));
    }

    #[test]
    fn value_preserving_edit_is_still_refused() {
        let mut log = AuditLog::new();
        log.record(0, "po-1", LogKind::Lifecycle, json!({"v": 75.67488581582963}));
        let text = log.to_ndjson().replace("75.67488581582963", "75.67488581582962");
        assert!(matches!(parse_ndjson(&text), Err(LogError::MalformedRecord { line: 1, .. })));
    }

    #[test]
    fn ndjson_round_trip_preserves_chain() {
        let log = sample_log(30);
        let text = log.to_ndjson();
        let parsed = parse_ndjson(&text).unwrap();
        assert_eq!(parsed, log.records());
        assert_eq!(verify_chain(&parsed).unwrap(), ChainStatus::Ok);
    }

    #[test]
    fn unknown_field_is_malformed() {
        let err = parse_ndjson("{\"seq\":1,\"bogus\":2}\n").unwrap_err();
        assert!(matches!(err, LogError::MalformedRecord { line: 1, .. }));
    }

    #[test]
    fn reconstruct_filters_and_renders() {
        let log = sample_log(9);
        let tl = reconstruct(
            log.records(),
            &TimelineFilter {
                actor: Some("dev-1".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(tl.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![2, 5, 8]);
        assert!(tl[0].text.contains("spo2=97.5%"));
    }

    #[test]
    fn empty_window_is_empty_timeline() {
        let log = sample_log(9);
        let f = TimelineFilter {
            from_ms: Some(10_000),
            to_ms: Some(20_000),
            ..Default::default()
        };
        assert!(reconstruct(log.records(), &f).unwrap().is_empty());
    }

    #[test]
    fn reconstruct_refuses_tampered_span() {
        let mut rs = sample_log(9).into_records();
        rs[3].actor = "mallory".into();
        let err = reconstruct(&rs, &TimelineFilter::default()).unwrap_err();
        assert!(matches!(err, LogError::IntegrityFailure { first_bad_seq: 4 }));
    }

    #[test]
    fn citations_must_precede_commands() {
        let mut log = AuditLog::new();
        log.record(0, "dev", LogKind::SamplePublished, json!({"writer": "w1", "seq": 1}));
        log.record(1, "app", LogKind::Command, json!({"event": "issued", "cites": [{"writer": "w1", "seq": 1}]}));
        log.record(2, "app", LogKind::Command, json!({"event": "issued", "cites": [{"writer": "w1", "seq": 2}]}));
        log.record(3, "dev", LogKind::SamplePublished, json!({"writer": "w1", "seq": 2}));
        let bad = check_citations(log.records(), false);
        assert_eq!(
            bad,
            vec![CitationViolation {
                command_seq: 3,
                writer: "w1".into(),
                sample_seq: 2
            }]
        );
    }

    #[test]
    fn sim_time_formatting() {
        assert_eq!(format_sim_time(3_723_045), "01:02:03.045");
    }
}
