//! Deterministic tick loop.
//!
//! Each tick runs, in order: due script events, device ticks (commands in,
//! samples out), one patient step, then every app period that has come due.
//! All randomness comes from the scenario seed, so a scenario and seed pair
//! always produces the same log bytes.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::apps::Directive;
use crate::bus::{
    command_topic, Bus, BusConfig, CredentialAuthority, Credential, DeviceDescriptor, ParticipantHandle, Payload,
    PublishedTopic, ReaderId, WriterId,
};
use crate::devices::{Command, DeviceMode, DeviceState, Fault, FaultKind, ModeChange};
use crate::logger::{AuditLog, LogError, LogKind};
use crate::metrics::{compute_metrics, RunMetrics};
use crate::patient::{step, PatientInputs, PatientState, VitalsEmitter};
use crate::scenario::{CpbPhase, DeviceTemplate, ScenarioError, ScenarioSpec, ScriptEntry, ScriptEvent};
use crate::supervisor::{command_qos, AppManifest, AppSummary, Supervisor, SupervisorError};

pub const HARNESS_ID: &str = "harness";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Supervisor(#[from] SupervisorError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A device plugged into the simulated bedside.
pub struct SimDevice {
    pub state: DeviceState,
    handle: Option<ParticipantHandle>,
    writers: BTreeMap<String, WriterId>,
    command_readers: Vec<ReaderId>,
}

impl SimDevice {
    pub fn connected(&self) -> bool {
        self.handle.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviceView {
    pub device_id: String,
    pub device_kind: crate::bus::DeviceKind,
    pub mode: String,
    pub connected: bool,
    pub fault: Option<FaultKind>,
    pub topics: Vec<String>,
}

pub struct Simulation {
    spec: ScenarioSpec,
    bus: Bus,
    supervisor: Supervisor,
    devices: BTreeMap<String, SimDevice>,
    state: PatientState,
    emitter: VitalsEmitter,
    vitals: Payload,
    inputs: PatientInputs,
    now_ms: u64,
    script: VecDeque<ScriptEntry>,
    launches: VecDeque<crate::scenario::AppEntry>,
    connects: BTreeMap<u64, Vec<String>>,
    clinicians: BTreeMap<String, Credential>,
    finished: bool,
}

fn descriptor_for(t: &DeviceTemplate, authority: &CredentialAuthority) -> DeviceDescriptor {
    let mut d = DeviceDescriptor {
        device_id: t.device_id.clone(),
        device_kind: t.device_kind,
        published_topics: t
            .streams()
            .iter()
            .map(|s| PublishedTopic {
                topic: t.topic(&s.stream),
                qos: s.offered_qos(),
                nominal_rate_ms: s.period_ms,
            })
            .collect(),
        accepted_commands: t.commands(),
        role: t.role.clone(),
        credential: Credential::unsigned(&t.device_id, &t.role, u64::MAX),
    };
    if t.forged_credential {
        CredentialAuthority::new(b"counterfeit".to_vec()).sign_descriptor(&mut d);
    } else {
        authority.sign_descriptor(&mut d);
    }
    d
}

impl Simulation {
    /// Builds the bedside at t=0. `seed` overrides the scenario's own seed.
    pub fn new(spec: ScenarioSpec, seed: Option<u64>) -> Result<Self, SimError> {
        spec.validate()?;
        let seed = seed.unwrap_or(spec.seed);
        let authority = CredentialAuthority::new(spec.registry_key.as_bytes().to_vec());
        let mut bus = Bus::new(
            BusConfig {
                beacon_interval_ms: spec.bus.beacon_interval_ms,
                beacon_phase_ms: 0,
                patient_id: spec.patient_record.patient_id.clone(),
                drop_probability: spec.bus.drop_probability,
                seed,
            },
            authority.clone(),
            spec.policy.clone(),
        );
        bus.log_mut().record(
            0,
            HARNESS_ID,
            LogKind::Lifecycle,
            json!({
                "event": "scenario_started",
                "scenario": spec.name,
                "seed": seed,
                "tick_ms": spec.tick_ms,
                "duration_ms": spec.duration_ms,
                "settle_ms": spec.settle_ms,
                "patient_id": spec.patient_record.patient_id,
                "patient_record": spec.patient_record,
            }),
        );

        let mut supervisor = Supervisor::new(spec.patient_record.clone());
        supervisor.attach(&mut bus, 0)?;
        let mut clinicians = BTreeMap::new();
        for c in &spec.clinicians {
            let cred = authority.issue(&c.id, &c.role, u64::MAX);
            supervisor.add_clinician(&mut bus, &cred, 0)?;
            clinicians.insert(c.id.clone(), cred);
        }

        let mut devices = BTreeMap::new();
        let mut connects: BTreeMap<u64, Vec<String>> = BTreeMap::new();
        for t in &spec.devices {
            let descriptor = descriptor_for(t, &authority);
            devices.insert(
                t.device_id.clone(),
                SimDevice {
                    state: DeviceState::new(descriptor, &t.setup),
                    handle: None,
                    writers: BTreeMap::new(),
                    command_readers: Vec::new(),
                },
            );
            connects.entry(t.connect_ms).or_default().push(t.device_id.clone());
        }

        let mut state = PatientState::baseline(&spec.plant);
        if let Some(g) = spec.initial.glucose {
            state.glucose = g;
        }
        let mut launches: Vec<_> = spec.apps.clone();
        launches.sort_by_key(|a| a.launch_ms);
        let script = spec.expanded_script().into();
        let emitter = VitalsEmitter::new(seed, spec.noise.clone());

        let mut sim = Self {
            spec,
            bus,
            supervisor,
            devices,
            state,
            emitter,
            vitals: Payload::new(),
            inputs: PatientInputs::default(),
            now_ms: 0,
            script,
            launches: launches.into(),
            connects,
            clinicians,
            finished: false,
        };
        sim.connect_due();
        sim.launch_due()?;
        Ok(sim)
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn supervisor(&self) -> &Supervisor {
        &self.supervisor
    }

    pub fn patient(&self) -> &PatientState {
        &self.state
    }

    /// The most recent noisy measurement set the devices sampled.
    pub fn vitals(&self) -> &Payload {
        &self.vitals
    }

    pub fn inputs(&self) -> PatientInputs {
        self.inputs
    }

    pub fn device(&self, id: &str) -> Option<&SimDevice> {
        self.devices.get(id)
    }

    pub fn device_views(&self) -> Vec<DeviceView> {
        self.devices
            .values()
            .map(|d| DeviceView {
                device_id: d.state.id().to_string(),
                device_kind: d.state.kind(),
                mode: d.state.mode.label().to_string(),
                connected: d.connected(),
                fault: d.state.active_fault(self.now_ms).map(|f| f.kind),
                topics: d.state.descriptor.published_topics.iter().map(|t| t.topic.clone()).collect(),
            })
            .collect()
    }

    pub fn clinician_credential(&self, id: &str) -> Option<&Credential> {
        self.clinicians.get(id)
    }

    pub fn log(&self) -> &AuditLog {
        self.bus.log()
    }

    pub fn drain_events(&mut self) -> Vec<crate::supervisor::ConsoleEvent> {
        self.supervisor.drain_events()
    }

    // Console-facing operations, applied between ticks at the current time.

    pub fn launch_app(&mut self, manifest: AppManifest, force: bool) -> Result<AppSummary, SupervisorError> {
        self.supervisor.launch_app(&mut self.bus, manifest, force, self.now_ms)
    }

    pub fn submit_override(&mut self, app_id: &str, directive: Directive, credential: &Credential) -> Result<u64, SupervisorError> {
        self.supervisor
            .submit_override(&mut self.bus, app_id, directive, credential, self.now_ms)
    }

    pub fn ack_alarm(&mut self, alarm_id: u64, credential: &Credential) -> Result<crate::alarms::Alarm, SupervisorError> {
        self.supervisor.ack_alarm(&mut self.bus, alarm_id, credential, self.now_ms)
    }

    fn connect(&mut self, id: &str) {
        let now = self.now_ms;
        let Some(dev) = self.devices.get_mut(id) else {
            return;
        };
        let descriptor = dev.state.descriptor.clone();
        let Ok(handle) = self.bus.register_participant(&descriptor, now) else {
            // The bus has already logged why.
            return;
        };
        dev.handle = Some(handle);
        dev.writers.clear();
        dev.command_readers.clear();
        for t in &descriptor.published_topics {
            if let Ok(w) = self.bus.create_writer(handle, &t.topic, t.qos, now) {
                dev.writers.insert(t.topic.clone(), w);
            }
        }
        for verb in &descriptor.accepted_commands {
            if let Ok(r) = self.bus.create_reader(handle, &command_topic(id, verb), command_qos(), now) {
                dev.command_readers.push(r);
            }
        }
    }

    fn disconnect(&mut self, id: &str) {
        let now = self.now_ms;
        if let Some(dev) = self.devices.get_mut(id) {
            if let Some(h) = dev.handle.take() {
                let _ = self.bus.revoke(h, now);
            }
            dev.writers.clear();
            dev.command_readers.clear();
        }
    }

    fn connect_due(&mut self) {
        let due: Vec<u64> = self.connects.range(..=self.now_ms).map(|(t, _)| *t).collect();
        for t in due {
            for id in self.connects.remove(&t).unwrap_or_default() {
                self.connect(&id);
            }
        }
    }

    fn launch_due(&mut self) -> Result<(), SimError> {
        while self.launches.front().is_some_and(|a| a.launch_ms <= self.now_ms) {
            let entry = self.launches.pop_front().expect("checked");
            match self
                .supervisor
                .launch_app(&mut self.bus, entry.manifest.clone(), entry.force, self.now_ms)
            {
                Ok(_) | Err(SupervisorError::NotReady { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn log_mode_changes(&mut self, changes: &[ModeChange]) {
        for c in changes {
            self.bus.log_mut().record(
                self.now_ms,
                &c.device_id,
                LogKind::Lifecycle,
                json!({
                    "event": "mode_change",
                    "device": c.device_id,
                    "from": c.from.label(),
                    "to": c.to.label(),
                    "mode": c.to,
                    "cause": c.cause,
                }),
            );
            self.supervisor.push_event(
                "device",
                self.now_ms,
                json!({"device_id": c.device_id, "mode": c.to.label(), "cause": c.cause}),
            );
        }
    }

    fn apply_script(&mut self, entry: ScriptEntry) {
        let now = self.now_ms;
        match entry.event {
            ScriptEvent::Command {
                issuer,
                device,
                verb,
                arg,
                duration_ms,
            } => {
                let mut cmd = Command::new(verb);
                cmd.arg = arg;
                cmd.duration_ms = duration_ms;
                if let Err(e) = self.supervisor.console_command(&mut self.bus, &issuer, &device, &cmd, None, now) {
                    self.script_failed(&issuer, &e.to_string());
                }
            }
            ScriptEvent::Fault {
                device,
                kind,
                duration_ms,
            } => {
                let fault = Fault::new(kind, now, now + duration_ms);
                let Some(dev) = self.devices.get_mut(&device) else {
                    return;
                };
                match dev.state.inject_fault(fault) {
                    Ok(()) => {
                        self.bus.log_mut().record(
                            now,
                            HARNESS_ID,
                            LogKind::Fault,
                            json!({"event": "injected", "device": device, "fault": kind, "from_ms": now, "until_ms": now + duration_ms}),
                        );
                        self.supervisor.push_event(
                            "device",
                            now,
                            json!({"device_id": device, "fault": kind, "until_ms": now + duration_ms}),
                        );
                        if kind == FaultKind::InterfaceError {
                            self.disconnect(&device);
                            self.connects.entry(now + duration_ms).or_default().push(device);
                        }
                    }
                    Err(e) => self.script_failed(HARNESS_ID, &e.to_string()),
                }
            }
            ScriptEvent::PcaButton { device, .. } => {
                let Some(dev) = self.devices.get_mut(&device) else {
                    return;
                };
                let result = dev.state.apply_command(&Command::new("bolus"), "patient", now);
                let changes = result.as_ref().cloned().unwrap_or_default();
                self.log_device_command(&device, "patient", &Command::new("bolus"), result.map(|_| ()));
                self.log_mode_changes(&changes);
            }
            ScriptEvent::XrayRequest { device, exposure_ms } => {
                if let Some(dev) = self.devices.get_mut(&device) {
                    dev.state.request_exposure(exposure_ms);
                    self.bus.log_mut().record(
                        now,
                        HARNESS_ID,
                        LogKind::Lifecycle,
                        json!({"event": "xray_requested", "device": device, "exposure_ms": exposure_ms}),
                    );
                }
            }
            ScriptEvent::CpbPhase { device, phase } => {
                let Some(dev) = self.devices.get_mut(&device) else {
                    return;
                };
                let changes = match phase {
                    CpbPhase::OnBypass => dev.state.start_bypass(),
                    CpbPhase::Wean => dev.state.request_wean(now),
                };
                self.log_mode_changes(&changes);
            }
            ScriptEvent::Override { app, clinician, directive } => {
                let cred = self.clinicians.get(&clinician).cloned();
                let result = match cred {
                    Some(c) => self.supervisor.submit_override(&mut self.bus, &app, directive, &c, now).map(|_| ()),
                    None => Err(SupervisorError::UnknownClinician(clinician.clone())),
                };
                if let Err(e) = result {
                    self.script_failed(&clinician, &e.to_string());
                }
            }
        }
    }

    fn script_failed(&mut self, actor: &str, error: &str) {
        self.bus.log_mut().record(
            self.now_ms,
            actor,
            LogKind::Lifecycle,
            json!({"event": "script_failed", "severity": "warning", "error": error}),
        );
    }

    fn log_device_command(&mut self, device: &str, issuer: &str, cmd: &Command, result: Result<(), crate::devices::DeviceError>) {
        let (event, reason) = match &result {
            Ok(()) => ("accepted", None),
            Err(crate::devices::DeviceError::Lost) => ("lost", Some(result.as_ref().unwrap_err().to_string())),
            Err(e) => ("refused", Some(e.to_string())),
        };
        let mut payload = json!({"event": event, "device": device, "verb": cmd.verb, "issuer": issuer});
        if let Some(a) = cmd.arg {
            payload["arg"] = json!(a);
        }
        if let Some(r) = reason {
            payload["reason"] = json!(r);
        }
        self.bus.log_mut().record(self.now_ms, device, LogKind::Command, payload);
    }

    fn tick_devices(&mut self) -> PatientInputs {
        let now = self.now_ms;
        let mut inputs = PatientInputs::default();
        let ids: Vec<String> = self.devices.keys().cloned().collect();
        for id in ids {
            let readers = self.devices[&id].command_readers.clone();
            let mut received = Vec::new();
            for r in readers {
                if let Ok(samples) = self.bus.take(r, now) {
                    received.extend(samples);
                }
            }
            received.sort_by_key(|s| (s.sim_time_ms, s.writer_id, s.seq));
            for s in received {
                let Some(cmd) = Command::from_sample(&s) else {
                    continue;
                };
                let issuer = self
                    .bus
                    .writer_participant(s.writer_id)
                    .and_then(|h| self.bus.participant_subject(h))
                    .unwrap_or("?")
                    .to_string();
                let role = self.bus.writer_role(s.writer_id).unwrap_or("").to_string();
                let dev = self.devices.get_mut(&id).expect("listed");
                let result = dev.state.apply_command(&cmd, &role, now);
                let changes = result.as_ref().cloned().unwrap_or_default();
                self.log_device_command(&id, &issuer, &cmd, result.map(|_| ()));
                self.log_mode_changes(&changes);
            }

            let dev = self.devices.get_mut(&id).expect("listed");
            let out = dev.state.tick(&self.vitals, now);
            let writers = dev.writers.clone();
            inputs = inputs.combine(out.inputs);
            self.log_mode_changes(&out.mode_changes);
            for e in out.emissions {
                if let Some(w) = writers.get(&e.topic) {
                    let _ = self.bus.publish(*w, e.payload, now);
                }
            }
        }
        inputs
    }

    /// Advances one tick. Returns false once the run is over.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.finished {
            return Ok(false);
        }
        let now = self.now_ms;
        while self.script.front().is_some_and(|e| e.time_ms <= now) {
            let e = self.script.pop_front().expect("checked");
            self.apply_script(e);
        }
        self.connect_due();
        self.launch_due()?;

        self.vitals = self.emitter.emit(&self.state, now);
        self.inputs = self.tick_devices();

        let before = self.state.clone();
        let next = step(&before, &self.spec.patient_record, &self.spec.plant, &self.inputs, self.spec.tick_ms);
        self.bus.log_mut().record(
            now,
            HARNESS_ID,
            LogKind::Lifecycle,
            json!({"event": "physiology", "state": before, "inputs": self.inputs}),
        );
        self.supervisor.push_event(
            "vitals",
            now,
            json!({"vitals": self.vitals, "state": before}),
        );
        self.state = next;

        self.supervisor.schedule_period(&mut self.bus, now);

        if before.alive && !self.state.alive {
            self.bus.log_mut().record(
                now,
                HARNESS_ID,
                LogKind::Lifecycle,
                json!({"event": "patient_expired", "patient_id": self.spec.patient_record.patient_id, "hypoxic_ms": self.state.hypoxic_ms}),
            );
            self.end("patient_expired");
            return Ok(false);
        }
        self.now_ms += self.spec.tick_ms;
        if self.now_ms >= self.spec.duration_ms {
            self.end("duration_reached");
            return Ok(false);
        }
        Ok(true)
    }

    fn end(&mut self, reason: &str) {
        self.finished = true;
        let modes: BTreeMap<String, DeviceMode> = self.devices.iter().map(|(k, d)| (k.clone(), d.state.mode)).collect();
        self.bus.log_mut().record(
            self.now_ms,
            HARNESS_ID,
            LogKind::Lifecycle,
            json!({"event": "scenario_ended", "reason": reason, "device_modes": modes, "state": self.state}),
        );
    }

    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while self.step()? {}
        Ok(())
    }

    pub fn into_log(mut self) -> AuditLog {
        self.bus.take_log()
    }
}

/// Output of a batch run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log_path: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics: RunMetrics,
}

/// Runs a scenario to completion in memory.
pub fn run_scenario(spec: &ScenarioSpec, seed: Option<u64>) -> Result<AuditLog, SimError> {
    let mut sim = Simulation::new(spec.clone(), seed)?;
    sim.run_to_end()?;
    Ok(sim.into_log())
}

/// Runs a scenario and writes `<name>.ndjson` and `<name>.metrics.json` into `out_dir`.
pub fn run(spec: &ScenarioSpec, seed: Option<u64>, out_dir: &Path) -> Result<RunOutput, SimError> {
    let log = run_scenario(spec, seed)?;
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| SimError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let log_path = out_dir.join(format!("{}.ndjson", spec.name));
    log.write_to(&log_path)?;
    let metrics = compute_metrics(log.records())?;
    let metrics_path = out_dir.join(format!("{}.metrics.json", spec.name));
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&metrics).expect("metrics encode"))
        .map_err(io_err(&metrics_path))?;
    Ok(RunOutput {
        log_path,
        metrics_path,
        metrics,
    })
}
