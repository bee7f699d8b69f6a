//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use ice_core::bus::{QosProfile, Reliability};
use ice_core::logger::{check_citations, parse_ndjson, verify_chain, ChainStatus, LogKind, LogRecord};
use ice_core::patient::{PatientInputs, PatientRecord, PatientState, PlantParams};
use ice_core::scenario::{AppEntry, ScenarioSpec};
use ice_core::sim::run_scenario;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

pub fn load(name: &str) -> ScenarioSpec {
    ScenarioSpec::load(&scenarios_dir().join(format!("{name}.json"))).expect("shipped scenario loads")
}

pub const SHIPPED: [&str; 8] = [
    "xray-unsafe",
    "xray-safe",
    "cpb-unsafe",
    "cpb-safe",
    "pca-unsafe",
    "pca-safe",
    "glucose-protocol",
    "glucose-pclc",
];

pub fn run(spec: &ScenarioSpec, seed: Option<u64>) -> Vec<LogRecord> {
    run_scenario(spec, seed).expect("scenario runs").into_records()
}

pub fn events<'a>(records: &'a [LogRecord], kind: LogKind, event: &'a str) -> impl Iterator<Item = &'a LogRecord> + 'a {
    records.iter().filter(move |r| r.kind == kind && r.event() == Some(event))
}

// ---------------------------------------------------------------- plant oracle

/// Fourth-order Runge-Kutta integration of the continuous plant at a fixed
/// 10 ms step, written out from the model equations.
pub struct Rk4Plant {
    pub g: f64,
    pub i: f64,
    pub cp: f64,
    pub ce: f64,
    params: PlantParams,
    vg_dl: f64,
}

pub const ORACLE_DT_MS: u64 = 10;

impl Rk4Plant {
    pub fn new(state: &PatientState, record: &PatientRecord, params: &PlantParams) -> Self {
        Self {
            g: state.glucose,
            i: state.insulin_effect,
            cp: state.opioid_plasma,
            ce: state.opioid_effect,
            params: params.clone(),
            vg_dl: params.glucose.vg_dl_per_kg * record.weight_kg,
        }
    }

    fn glucose_rhs(&self, g: f64, i: f64, u: &PatientInputs) -> (f64, f64) {
        let p = &self.params.glucose;
        let dg = p.k_egp * (p.basal_glucose - g) - p.k_si * i * g + u.dextrose_rate / self.vg_dl;
        let di = -p.k_dec * i + p.k_abs * u.insulin_rate;
        (dg, di)
    }

    fn opioid_rhs(&self, cp: f64, ce: f64) -> (f64, f64) {
        let p = &self.params.opioid;
        (-p.ke_per_s * cp, p.ke0_per_s * (cp - ce))
    }

    /// Holds `u` constant for `dt_ms`. A bolus lands at the start of the interval.
    pub fn advance(&mut self, u: &PatientInputs, dt_ms: u64) {
        self.cp += u.opioid_bolus / self.params.opioid.vd_l;
        let steps = dt_ms / ORACLE_DT_MS;
        let h_min = ORACLE_DT_MS as f64 / 60_000.0;
        let h_s = ORACLE_DT_MS as f64 / 1000.0;
        for _ in 0..steps {
            let (g, i) = (self.g, self.i);
            let k1 = self.glucose_rhs(g, i, u);
            let k2 = self.glucose_rhs(g + h_min / 2.0 * k1.0, i + h_min / 2.0 * k1.1, u);
            let k3 = self.glucose_rhs(g + h_min / 2.0 * k2.0, i + h_min / 2.0 * k2.1, u);
            let k4 = self.glucose_rhs(g + h_min * k3.0, i + h_min * k3.1, u);
            self.g = g + h_min / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            self.i = i + h_min / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);

            let (cp, ce) = (self.cp, self.ce);
            let k1 = self.opioid_rhs(cp, ce);
            let k2 = self.opioid_rhs(cp + h_s / 2.0 * k1.0, ce + h_s / 2.0 * k1.1);
            let k3 = self.opioid_rhs(cp + h_s / 2.0 * k2.0, ce + h_s / 2.0 * k2.1);
            let k4 = self.opioid_rhs(cp + h_s * k3.0, ce + h_s * k3.1);
            self.cp = cp + h_s / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            self.ce = ce + h_s / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
    }

    pub fn resp_rate(&self, ventilated: bool) -> f64 {
        let gas = &self.params.gas;
        if ventilated {
            return gas.ventilator_rate;
        }
        if !gas.spontaneous_breathing {
            return 0.0;
        }
        let p = &self.params.opioid;
        let c = self.ce.max(0.0).powf(p.gamma);
        p.rr0 * (1.0 - p.emax * c / (p.ce50.powf(p.gamma) + c))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct OracleGap {
    pub glucose: f64,
    pub resp_rate: f64,
    pub ticks: usize,
}

/// Replays the logged input sequence through the RK4 oracle and measures the
/// largest gap to the logged (Euler) trajectory.
pub fn oracle_gap(spec: &ScenarioSpec, records: &[LogRecord]) -> OracleGap {
    let ticks: Vec<(PatientState, PatientInputs)> = events(records, LogKind::Lifecycle, "physiology")
        .map(|r| {
            (
                serde_json::from_value(r.payload["state"].clone()).expect("state"),
                serde_json::from_value(r.payload["inputs"].clone()).expect("inputs"),
            )
        })
        .collect();
    let mut gap = OracleGap {
        ticks: ticks.len(),
        ..Default::default()
    };
    let Some((first, _)) = ticks.first() else { return gap };
    let mut oracle = Rk4Plant::new(first, &spec.patient_record, &spec.plant);
    for w in ticks.windows(2) {
        let (_, u) = &w[0];
        let (next, _) = &w[1];
        oracle.advance(u, spec.tick_ms);
        gap.glucose = gap.glucose.max((oracle.g - next.glucose).abs());
        gap.resp_rate = gap.resp_rate.max((oracle.resp_rate(u.ventilator_on) - next.resp_rate).abs());
    }
    gap
}

// ----------------------------------------------------------------- QoS oracle

/// Compatibility by enumeration: every gap the writer may leave between
/// samples must be one the reader tolerates, and every delivery guarantee the
/// reader asks for must be among those the writer offers.
pub fn brute_force_match(offered: &QosProfile, requested: &QosProfile) -> bool {
    let guarantees = |r: Reliability| -> Vec<Reliability> {
        match r {
            Reliability::Reliable => vec![Reliability::BestEffort, Reliability::Reliable],
            Reliability::BestEffort => vec![Reliability::BestEffort],
        }
    };
    let offered_set = guarantees(offered.reliability);
    if !offered_set.contains(&requested.reliability) {
        return false;
    }
    (1..=offered.deadline_ms).all(|gap| gap <= requested.deadline_ms)
}

pub fn random_qos(rng: &mut impl Rng, max_deadline: u64) -> QosProfile {
    let reliability = if rng.random_bool(0.5) {
        Reliability::Reliable
    } else {
        Reliability::BestEffort
    };
    QosProfile::new(
        reliability,
        rng.random_range(1..=max_deadline),
        rng.random_range(1..=10 * max_deadline),
        rng.random_range(1..=32),
    )
}

/// Every profile over a small lattice.
pub fn qos_lattice() -> Vec<QosProfile> {
    let mut out = Vec::new();
    for r in [Reliability::BestEffort, Reliability::Reliable] {
        for d in 1..=8 {
            for l in 1..=4 {
                for h in 1..=3 {
                    out.push(QosProfile::new(r, d, l, h));
                }
            }
        }
    }
    out
}

// ------------------------------------------------------------------- causality

/// Ordering violations in a log, as readable strings.
pub fn causality_violations(records: &[LogRecord]) -> Vec<String> {
    let mut bad = Vec::new();
    let mut published: HashSet<(String, u64)> = HashSet::new();
    let mut overrides: HashSet<u64> = HashSet::new();
    let mut last_t = 0;
    for r in records {
        if r.sim_time_ms < last_t {
            bad.push(format!("seq {} goes back in time", r.seq));
        }
        last_t = r.sim_time_ms;
        let p = &r.payload;
        let key = || {
            (
                p.get("writer").and_then(Value::as_str).unwrap_or("").to_string(),
                p.get("seq").and_then(Value::as_u64).unwrap_or(0),
            )
        };
        match r.kind {
            LogKind::SamplePublished => {
                published.insert(key());
            }
            LogKind::SampleDelivered => {
                if !published.contains(&key()) {
                    bad.push(format!("seq {} delivers {:?} before it was published", r.seq, key()));
                }
            }
            LogKind::Override => {
                overrides.insert(r.seq);
            }
            LogKind::Command => {
                if let Some(o) = p.get("override_seq").and_then(Value::as_u64) {
                    if !overrides.contains(&o) || o >= r.seq {
                        bad.push(format!("command seq {} cites override {o} that does not precede it", r.seq));
                    }
                }
            }
            _ => {}
        }
    }
    for v in check_citations(records, true) {
        bad.push(format!("command seq {} cites undelivered sample {}#{}", v.command_seq, v.writer, v.sample_seq));
    }
    bad
}

// --------------------------------------------------------------------- tamper

#[derive(Debug, Default)]
pub struct TamperOutcome {
    pub trials: usize,
    pub detected: usize,
    pub misattributed: usize,
}

/// Flips one random bit in the serialized log per trial and checks that
/// parsing or chain verification catches it at or before the damaged record.
pub fn tamper_trials(ndjson: &str, trials: usize, seed: u64) -> TamperOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let line_starts: Vec<usize> = std::iter::once(0)
        .chain(ndjson.match_indices('\n').map(|(i, _)| i + 1))
        .filter(|&i| i < ndjson.len())
        .collect();
    let mut out = TamperOutcome {
        trials,
        ..Default::default()
    };
    for _ in 0..trials {
        let line = rng.random_range(0..line_starts.len());
        let start = line_starts[line];
        let end = ndjson[start..].find('\n').map_or(ndjson.len(), |e| start + e);
        let pos = rng.random_range(start..end);
        let bit = rng.random_range(0..8);
        let mut bytes = ndjson.as_bytes().to_vec();
        bytes[pos] ^= 1 << bit;
        let caught = match String::from_utf8(bytes) {
            Err(_) => true,
            Ok(text) => match parse_ndjson(&text) {
                Err(_) => true,
                Ok(records) => match verify_chain(&records) {
                    Err(_) => true,
                    Ok(ChainStatus::Ok) => false,
                    Ok(ChainStatus::FirstBad(seq)) => {
                        if seq > line as u64 + 1 {
                            out.misattributed += 1;
                        }
                        true
                    }
                },
            },
        };
        if caught {
            out.detected += 1;
        }
    }
    out
}

// ---------------------------------------------------------------- partitioning

pub fn busy_entry(kind: &str, stream: &str, deadline_ms: u64) -> AppEntry {
    serde_json::from_value(json!({
        "manifest": {
            "app_id": "busy",
            "subscribed_topics": [{
                "device_kind": kind,
                "stream": stream,
                "qos": {"reliability": "BEST_EFFORT", "deadline_ms": deadline_ms,
                        "lifespan_ms": (3 * deadline_ms).max(5000), "history_depth": 8}
            }],
            "tick_budget": 100,
            "control_period_ms": 1000,
            "app": {"type": "busy_loop", "device_kind": kind, "stream": stream, "spin": 10000}
        }
    }))
    .expect("busy manifest")
}

/// Issued commands keyed by issuer, stripped of seq and hashes.
pub fn commands_by_issuer(records: &[LogRecord]) -> BTreeMap<String, Vec<(u64, Value)>> {
    let mut out: BTreeMap<String, Vec<(u64, Value)>> = BTreeMap::new();
    for r in events(records, LogKind::Command, "issued") {
        out.entry(r.actor.clone()).or_default().push((r.sim_time_ms, r.payload.clone()));
    }
    out
}

/// Runs `spec` with and without a busy-loop app and returns the command
/// streams that differ, plus the busy app's final log footprint.
pub struct PartitionReport {
    pub differing_issuers: Vec<String>,
    pub baseline_commands: usize,
    pub busy_budget_records: usize,
    pub busy_commands: usize,
}

pub fn partition_check(spec: &ScenarioSpec, busy: AppEntry) -> PartitionReport {
    let base = commands_by_issuer(&run(spec, None));
    let mut loaded = spec.clone();
    loaded.apps.push(busy);
    let records = run(&loaded, None);
    let busy_budget_records = records
        .iter()
        .filter(|r| r.event() == Some("budget_exceeded") && r.payload["app_id"] == "busy")
        .count();
    let mut with = commands_by_issuer(&records);
    let busy_commands = with.remove("busy").map_or(0, |v| v.len());
    let mut differing = Vec::new();
    let issuers: HashSet<&String> = base.keys().chain(with.keys()).collect();
    for who in issuers {
        if base.get(who) != with.get(who) {
            differing.push(who.clone());
        }
    }
    differing.sort();
    PartitionReport {
        differing_issuers: differing,
        baseline_commands: base.values().map(Vec::len).sum(),
        busy_budget_records,
        busy_commands,
    }
}

// -------------------------------------------------------------------- security

/// Counts SECURITY records by event name.
pub fn security_counts(records: &[LogRecord]) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    for r in records.iter().filter(|r| r.kind == LogKind::Security) {
        *out.entry(r.event().unwrap_or("").to_string()).or_default() += 1;
    }
    out
}

// ------------------------------------------------------------- dose response

/// Paired runs where the second insulin sequence dominates the first
/// pointwise; glucose must never end a minute higher under more insulin.
pub fn dose_response_violations(trials: usize, seed: u64) -> Vec<String> {
    use ice_core::patient::step;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let record = PatientRecord::default();
    let mut bad = Vec::new();
    for trial in 0..trials {
        let mut params = PlantParams::default();
        params.glucose.basal_glucose = rng.random_range(80.0..250.0);
        params.glucose.k_si = rng.random_range(0.00001..0.001);
        params.glucose.k_dec = rng.random_range(0.005..0.05);
        params.glucose.k_egp = rng.random_range(0.001..0.03);
        let mut lo = PatientState::baseline(&params);
        lo.glucose = rng.random_range(40.0..400.0);
        let mut hi = lo.clone();
        // One hour at the simulator's 1 s tick, inputs changing each minute.
        for minute in 0..60 {
            let base = rng.random_range(0.0..6.0);
            let extra = rng.random_range(0.0..4.0);
            let dex = if rng.random_bool(0.2) { rng.random_range(0.0..300.0) } else { 0.0 };
            let u = |rate: f64| PatientInputs {
                insulin_rate: rate,
                dextrose_rate: dex,
                ..Default::default()
            };
            for _ in 0..60 {
                lo = step(&lo, &record, &params, &u(base), 1000);
                hi = step(&hi, &record, &params, &u(base + extra), 1000);
            }
            if hi.glucose > lo.glucose + 1e-9 {
                bad.push(format!("trial {trial} minute {minute}: {} > {}", hi.glucose, lo.glucose));
                break;
            }
        }
    }
    bad
}

// ------------------------------------------------------------- security ward

/// A ward with one oximeter, one capnometer, a monitor app and one extra
/// device under test.
pub fn ward(extra_device: Value) -> ScenarioSpec {
    ScenarioSpec::from_json(
        &json!({
            "schema_version": 1,
            "name": "security",
            "duration_ms": 60000,
            "devices": [
                {"device_id": "po-1", "device_kind": "PULSE_OX"},
                {"device_id": "cap-1", "device_kind": "CAPNOMETER"},
                extra_device
            ],
            "apps": [{"manifest": {
                "app_id": "monitor",
                "subscribed_topics": [
                    {"device_kind": "PULSE_OX", "stream": "spo2",
                     "qos": {"reliability": "BEST_EFFORT", "deadline_ms": 1000, "lifespan_ms": 5000, "history_depth": 8}}
                ],
                "control_period_ms": 1000,
                "app": {"type": "monitor"}
            }}]
        })
        .to_string(),
    )
    .expect("valid scenario")
}

pub fn forged_oximeter() -> Value {
    json!({"device_id": "po-2", "device_kind": "PULSE_OX", "forged_credential": true})
}

pub fn unprivileged_oximeter() -> Value {
    json!({"device_id": "po-2", "device_kind": "PULSE_OX", "role": "visitor"})
}

/// Offers a 2 s deadline to readers that need 1 s; plugged in after launch.
pub fn slow_oximeter() -> Value {
    json!({
        "device_id": "po-2", "device_kind": "PULSE_OX", "connect_ms": 5000,
        "streams": [{"stream": "spo2", "period_ms": 1000,
                     "qos": {"reliability": "RELIABLE", "deadline_ms": 2000, "lifespan_ms": 6000, "history_depth": 8}}]
    })
}

/// Records of `kind` whose topic belongs to `device`.
pub fn flow(records: &[LogRecord], kind: LogKind, device: &str) -> usize {
    let needle = format!("/{device}/");
    records
        .iter()
        .filter(|r| r.kind == kind && r.payload["topic"].as_str().is_some_and(|t| t.contains(&needle)))
        .count()
}

pub fn security_warnings(records: &[LogRecord]) -> Vec<&LogRecord> {
    records
        .iter()
        .filter(|r| r.kind == LogKind::Security && r.payload["severity"] == "warning")
        .collect()
}

// ------------------------------------------------------------- PCA latency

/// First instant at which a lockout condition has held for its full window,
/// recomputed from the samples the devices published.
pub fn pca_condition_onset(records: &[LogRecord], cfg: &ice_core::apps::PcaConfig) -> Option<u64> {
    let mut spo2_run: Option<u64> = None;
    let mut rr_run: Option<u64> = None;
    for r in records.iter().filter(|r| r.kind == LogKind::SamplePublished) {
        let topic = r.payload["topic"].as_str().unwrap_or("");
        let data = &r.payload["data"];
        let t = r.sim_time_ms;
        if topic.starts_with("device/pulse_ox/") {
            if let Some(v) = data["spo2"]["value"].as_f64() {
                if v < cfg.spo2_low {
                    let since = *spo2_run.get_or_insert(t);
                    if t - since >= cfg.spo2_sustain_ms {
                        return Some(t);
                    }
                } else {
                    spo2_run = None;
                }
            }
        } else if topic.starts_with("device/capnometer/") {
            if let Some(v) = data["resp_rate"]["value"].as_f64() {
                if v < cfg.resp_rate_low {
                    let since = *rr_run.get_or_insert(t);
                    if t - since >= cfg.resp_rate_sustain_ms {
                        return Some(t);
                    }
                } else {
                    rr_run = None;
                }
            }
            if data["etco2"]["value"].as_f64().is_some_and(|v| v > cfg.etco2_high) {
                return Some(t);
            }
        }
    }
    None
}

/// Delay from condition onset to the interlock's first logged lockout.
pub fn pca_lockout_latency(spec: &ScenarioSpec, records: &[LogRecord]) -> Result<i64, String> {
    use ice_core::apps::AppConfig;
    let entry = spec
        .apps
        .iter()
        .find(|a| matches!(a.manifest.app, AppConfig::PcaInterlock(_)))
        .ok_or("no PCA interlock in scenario")?;
    let AppConfig::PcaInterlock(cfg) = &entry.manifest.app else { unreachable!() };
    let onset = pca_condition_onset(records, cfg).ok_or("condition never became sustained")?;
    let cmd = events(records, LogKind::Command, "issued")
        .find(|r| r.actor == entry.manifest.app_id && r.payload["verb"] == "lockout")
        .ok_or("no lockout command")?;
    Ok(cmd.sim_time_ms as i64 - onset as i64)
}
