//! The network controller: credentialed discovery, QoS-matched
//! publish/subscribe, access control and freshness enforcement.
//!
//! Transport is a set of in-process queues advanced by the simulation clock.
//! Every security-relevant refusal (bad credential, denied topic, QoS
//! mismatch) leaves exactly one record in the bus's audit log.

mod descriptor;
mod qos;
mod security;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};
use thiserror::Error;

pub use descriptor::{
    command_topic, device_topic, is_command_topic, DescriptorError, DeviceDescriptor, DeviceKind, PublishedTopic,
};
pub use qos::{match_qos, InvalidQos, QosProfile, Reliability};
pub use security::{
    topic_matches, AccessPolicy, AccessRule, Action, AuthFailure, Credential, CredentialAuthority,
};

use crate::logger::{AuditLog, LogKind};

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.strip_prefix($prefix)
                    .and_then(|n| n.parse().ok())
                    .map($name)
                    .ok_or_else(|| format!("bad {} id: {s}", stringify!($name)))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

id_type!(ParticipantHandle, "p");
id_type!(WriterId, "w");
id_type!(ReaderId, "r");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub value: f64,
    pub unit: String,
}

impl Measurement {
    pub fn new(value: f64, unit: impl Into<String>) -> Self {
        Self {
            value,
            unit: unit.into(),
        }
    }
}

/// Named scalar measurements with unit tags.
pub type Payload = BTreeMap<String, Measurement>;

pub fn payload_of<const N: usize>(items: [(&str, f64, &str); N]) -> Payload {
    items
        .into_iter()
        .map(|(k, v, u)| (k.to_string(), Measurement::new(v, u)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub topic: String,
    pub instance_key: String,
    pub seq: u64,
    pub sim_time_ms: u64,
    pub payload: Payload,
    pub writer_id: WriterId,
}

impl Sample {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.payload.get(name).map(|m| m.value)
    }

    pub fn reference(&self) -> SampleRef {
        SampleRef {
            writer: self.writer_id,
            seq: self.seq,
        }
    }
}

/// Pointer to a published sample, used to cite the inputs of a decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub writer: WriterId,
    pub seq: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum BusError {
    #[error("authentication failed for {subject}: {reason}")]
    AuthFailed { subject: String, reason: AuthFailure },
    #[error("access denied: role {role} may not {action:?} on {topic}")]
    AccessDenied { role: String, topic: String, action: Action },
    #[error("unknown participant {0}")]
    UnknownParticipant(ParticipantHandle),
    #[error("unknown writer {0}")]
    UnknownWriter(WriterId),
    #[error("unknown reader {0}")]
    UnknownReader(ReaderId),
    #[error(transparent)]
    InvalidQos(#[from] InvalidQos),
    #[error(transparent)]
    InvalidDescriptor(#[from] DescriptorError),
    #[error("participant {0} is already registered")]
    DuplicateParticipant(String),
    #[error("writer {writer} published at {now_ms} ms, before its previous sample at {last_ms} ms")]
    TimeWentBackwards { writer: WriterId, now_ms: u64, last_ms: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParticipantKind {
    Device { descriptor: DeviceDescriptor },
    App { app_id: String },
    Console { clinician_id: String },
    Service { name: String },
}

#[derive(Clone, Debug)]
struct Participant {
    subject: String,
    role: String,
    kind: ParticipantKind,
    expiry_ms: u64,
    visible_from_ms: u64,
    revoked: bool,
}

#[derive(Clone, Debug)]
struct Writer {
    participant: ParticipantHandle,
    topic: String,
    qos: QosProfile,
    instance_key: String,
    seq: u64,
    last_ms: Option<u64>,
}

#[derive(Clone, Debug)]
struct Queued {
    sample: Sample,
    lifespan_ms: u64,
}

#[derive(Clone, Debug)]
struct Reader {
    participant: ParticipantHandle,
    topic: String,
    qos: QosProfile,
    queues: BTreeMap<String, VecDeque<Queued>>,
    stale: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BusConfig {
    pub beacon_interval_ms: u64,
    /// Offset of the announcement grid inside each beacon interval.
    #[serde(default)]
    pub beacon_phase_ms: u64,
    pub patient_id: String,
    /// Probability that the fault injector loses a transmission.
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BusConfig {
    fn default() -> Self {
        Self {
            beacon_interval_ms: 100,
            beacon_phase_ms: 0,
            patient_id: "patient-1".into(),
            drop_probability: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BusStats {
    pub published: u64,
    pub enqueued: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub retransmitted: u64,
    pub evicted: u64,
    pub stale: u64,
}

pub struct Bus {
    config: BusConfig,
    authority: CredentialAuthority,
    policy: AccessPolicy,
    participants: BTreeMap<ParticipantHandle, Participant>,
    writers: BTreeMap<WriterId, Writer>,
    readers: BTreeMap<ReaderId, Reader>,
    matches: BTreeSet<(WriterId, ReaderId)>,
    next_id: u64,
    stats: BusStats,
    log: AuditLog,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Bus {
    pub fn new(config: BusConfig, authority: CredentialAuthority, policy: AccessPolicy) -> Self {
        Self {
            config,
            authority,
            policy,
            participants: BTreeMap::new(),
            writers: BTreeMap::new(),
            readers: BTreeMap::new(),
            matches: BTreeSet::new(),
            next_id: 1,
            stats: BusStats::default(),
            log: AuditLog::new(),
        }
    }

    pub fn config(&self) -> &BusConfig {
        &self.config
    }

    pub fn policy(&self) -> &AccessPolicy {
        &self.policy
    }

    pub fn authority(&self) -> &CredentialAuthority {
        &self.authority
    }

    pub fn log(&self) -> &AuditLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut AuditLog {
        &mut self.log
    }

    pub fn take_log(&mut self) -> AuditLog {
        std::mem::take(&mut self.log)
    }

    pub fn stats(&self) -> BusStats {
        self.stats
    }

    pub fn set_drop_probability(&mut self, p: f64) {
        self.config.drop_probability = p.clamp(0.0, 1.0);
    }

    fn next(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// First announcement instant at or after `t`.
    fn next_beacon(&self, t: u64) -> u64 {
        let b = self.config.beacon_interval_ms.max(1);
        let phase = self.config.beacon_phase_ms % b;
        if t <= phase {
            return phase;
        }
        let k = (t - phase).div_ceil(b);
        phase + k * b
    }

    fn security_event(&mut self, now_ms: u64, actor: &str, payload: Value) {
        self.log.record(now_ms, actor, LogKind::Security, payload);
    }

    fn admit(&mut self, subject: String, role: String, kind: ParticipantKind, expiry_ms: u64, now_ms: u64) -> Result<ParticipantHandle, BusError> {
        if self.participants.values().any(|p| !p.revoked && p.subject == subject) {
            return Err(BusError::DuplicateParticipant(subject));
        }
        let handle = ParticipantHandle(self.next());
        let visible_from_ms = self.next_beacon(now_ms);
        self.log.record(
            now_ms,
            &subject,
            LogKind::Lifecycle,
            json!({"event": "registered", "participant": handle, "role": role, "visible_from_ms": visible_from_ms}),
        );
        self.participants.insert(
            handle,
            Participant {
                subject,
                role,
                kind,
                expiry_ms,
                visible_from_ms,
                revoked: false,
            },
        );
        Ok(handle)
    }

    /// Admits a device after checking its credential.
    pub fn register_participant(&mut self, descriptor: &DeviceDescriptor, now_ms: u64) -> Result<ParticipantHandle, BusError> {
        if let Err(reason) = self.authority.verify_descriptor(descriptor, now_ms) {
            self.security_event(
                now_ms,
                &descriptor.device_id,
                json!({"event": "auth_failed", "severity": "warning", "reason": reason, "role": descriptor.role}),
            );
            return Err(BusError::AuthFailed {
                subject: descriptor.device_id.clone(),
                reason,
            });
        }
        descriptor.validate()?;
        self.admit(
            descriptor.device_id.clone(),
            descriptor.role.clone(),
            ParticipantKind::Device {
                descriptor: descriptor.clone(),
            },
            descriptor.credential.expiry_sim_time_ms,
            now_ms,
        )
    }

    /// Admits an app, console or service identity.
    pub fn register_identity(&mut self, credential: &Credential, kind: ParticipantKind, now_ms: u64) -> Result<ParticipantHandle, BusError> {
        if let Err(reason) = self.authority.verify(credential, now_ms) {
            self.security_event(
                now_ms,
                &credential.subject,
                json!({"event": "auth_failed", "severity": "warning", "reason": reason, "role": credential.role}),
            );
            return Err(BusError::AuthFailed {
                subject: credential.subject.clone(),
                reason,
            });
        }
        self.admit(
            credential.subject.clone(),
            credential.role.clone(),
            kind,
            credential.expiry_sim_time_ms,
            now_ms,
        )
    }

    /// Checks a credential without admitting anyone; failures are logged.
    pub fn authenticate(&mut self, credential: &Credential, now_ms: u64) -> Result<(), BusError> {
        self.authority.verify(credential, now_ms).map_err(|reason| {
            self.security_event(
                now_ms,
                &credential.subject,
                json!({"event": "auth_failed", "severity": "warning", "reason": reason, "role": credential.role}),
            );
            BusError::AuthFailed {
                subject: credential.subject.clone(),
                reason,
            }
        })
    }

    fn is_visible(&self, handle: ParticipantHandle, now_ms: u64) -> bool {
        self.participants
            .get(&handle)
            .is_some_and(|p| !p.revoked && p.visible_from_ms <= now_ms && p.expiry_ms >= now_ms)
    }

    /// Registered, unexpired, unrevoked devices whose announcement is due.
    pub fn discover(&self, now_ms: u64) -> Vec<DeviceDescriptor> {
        let mut out: Vec<DeviceDescriptor> = self
            .participants
            .iter()
            .filter(|(h, _)| self.is_visible(**h, now_ms))
            .filter_map(|(_, p)| match &p.kind {
                ParticipantKind::Device { descriptor } => Some(descriptor.clone()),
                _ => None,
            })
            .collect();
        out.sort_by(|a, b| a.device_id.cmp(&b.device_id));
        out
    }

    fn live_participant(&self, handle: ParticipantHandle) -> Result<&Participant, BusError> {
        self.participants
            .get(&handle)
            .filter(|p| !p.revoked)
            .ok_or(BusError::UnknownParticipant(handle))
    }

    pub fn participant_subject(&self, handle: ParticipantHandle) -> Option<&str> {
        self.participants.get(&handle).map(|p| p.subject.as_str())
    }

    pub fn participant_role(&self, handle: ParticipantHandle) -> Option<&str> {
        self.participants.get(&handle).map(|p| p.role.as_str())
    }

    pub fn is_registered(&self, handle: ParticipantHandle) -> bool {
        self.live_participant(handle).is_ok()
    }

    fn authorize(&mut self, handle: ParticipantHandle, topic: &str, action: Action, now_ms: u64) -> Result<(), BusError> {
        let p = self.live_participant(handle)?;
        let (subject, role) = (p.subject.clone(), p.role.clone());
        let mut allowed = self.policy.allows(&role, topic, action);
        let mut reason = "policy";
        if allowed && action == Action::Publish {
            if let ParticipantKind::Device { descriptor } = &p.kind {
                if descriptor.publishes(topic).is_none() {
                    allowed = false;
                    reason = "topic not declared by device";
                }
            }
        }
        if allowed {
            return Ok(());
        }
        self.security_event(
            now_ms,
            &subject,
            json!({"event": "access_denied", "severity": "warning", "role": role, "topic": topic, "action": action, "reason": reason}),
        );
        Err(BusError::AccessDenied {
            role,
            topic: topic.to_string(),
            action,
        })
    }

    fn pair(&mut self, w: WriterId, r: ReaderId, now_ms: u64) {
        let (Some(writer), Some(reader)) = (self.writers.get(&w), self.readers.get(&r)) else {
            return;
        };
        if writer.topic != reader.topic {
            return;
        }
        if match_qos(&writer.qos, &reader.qos) {
            self.matches.insert((w, r));
        } else {
            let subject = self.participants[&reader.participant].subject.clone();
            let payload = json!({
                "event": "qos_mismatch",
                "severity": "warning",
                "topic": writer.topic,
                "writer": w,
                "reader": r,
                "offered": writer.qos,
                "requested": reader.qos,
            });
            self.security_event(now_ms, &subject, payload);
        }
    }

    pub fn create_writer(&mut self, handle: ParticipantHandle, topic: &str, qos: QosProfile, now_ms: u64) -> Result<WriterId, BusError> {
        qos.validate()?;
        let action = if is_command_topic(topic) { Action::Command } else { Action::Publish };
        self.authorize(handle, topic, action, now_ms)?;
        let id = WriterId(self.next());
        let subject = self.participants[&handle].subject.clone();
        self.writers.insert(
            id,
            Writer {
                participant: handle,
                topic: topic.to_string(),
                qos,
                instance_key: format!("{}@{}", subject, self.config.patient_id),
                seq: 0,
                last_ms: None,
            },
        );
        let readers: Vec<ReaderId> = self
            .readers
            .iter()
            .filter(|(_, r)| r.topic == topic)
            .map(|(id, _)| *id)
            .collect();
        for r in readers {
            self.pair(id, r, now_ms);
        }
        Ok(id)
    }

    pub fn create_reader(&mut self, handle: ParticipantHandle, topic: &str, qos: QosProfile, now_ms: u64) -> Result<ReaderId, BusError> {
        qos.validate()?;
        self.authorize(handle, topic, Action::Subscribe, now_ms)?;
        let id = ReaderId(self.next());
        self.readers.insert(
            id,
            Reader {
                participant: handle,
                topic: topic.to_string(),
                qos,
                queues: BTreeMap::new(),
                stale: 0,
            },
        );
        let writers: Vec<WriterId> = self
            .writers
            .iter()
            .filter(|(_, w)| w.topic == topic)
            .map(|(id, _)| *id)
            .collect();
        for w in writers {
            self.pair(w, id, now_ms);
        }
        Ok(id)
    }

    fn transmission_lost(&self, w: WriterId, r: ReaderId, seq: u64) -> bool {
        let p = self.config.drop_probability;
        if p <= 0.0 {
            return false;
        }
        let h = splitmix(self.config.seed ^ splitmix(w.0 << 32 ^ r.0) ^ seq.rotate_left(17));
        ((h >> 11) as f64 / (1u64 << 53) as f64) < p
    }

    /// Assigns the next seq and enqueues the sample to every matched reader.
    pub fn publish(&mut self, writer_id: WriterId, payload: Payload, now_ms: u64) -> Result<Sample, BusError> {
        let writer = self.writers.get_mut(&writer_id).ok_or(BusError::UnknownWriter(writer_id))?;
        if let Some(last_ms) = writer.last_ms {
            if now_ms < last_ms {
                return Err(BusError::TimeWentBackwards {
                    writer: writer_id,
                    now_ms,
                    last_ms,
                });
            }
        }
        writer.seq += 1;
        writer.last_ms = Some(now_ms);
        let sample = Sample {
            topic: writer.topic.clone(),
            instance_key: writer.instance_key.clone(),
            seq: writer.seq,
            sim_time_ms: now_ms,
            payload,
            writer_id,
        };
        let lifespan_ms = writer.qos.lifespan_ms;
        let writer_participant = writer.participant;
        let subject = self.participants[&writer_participant].subject.clone();
        self.log.record(
            now_ms,
            subject,
            LogKind::SamplePublished,
            json!({
                "topic": sample.topic,
                "writer": writer_id,
                "seq": sample.seq,
                "instance_key": sample.instance_key,
                "data": sample.payload,
            }),
        );
        self.stats.published += 1;

        if !self.is_visible(writer_participant, now_ms) {
            return Ok(sample);
        }
        let targets: Vec<ReaderId> = self
            .matches
            .range((writer_id, ReaderId(0))..=(writer_id, ReaderId(u64::MAX)))
            .map(|(_, r)| *r)
            .collect();
        for r in targets {
            let reader_participant = self.readers[&r].participant;
            if !self.is_visible(reader_participant, now_ms) {
                continue;
            }
            if self.transmission_lost(writer_id, r, sample.seq) {
                if self.readers[&r].qos.reliability == Reliability::Reliable {
                    self.stats.retransmitted += 1;
                } else {
                    self.stats.dropped += 1;
                    continue;
                }
            }
            let reader = self.readers.get_mut(&r).expect("matched reader exists");
            let depth = reader.qos.history_depth;
            let q = reader.queues.entry(sample.instance_key.clone()).or_default();
            q.push_back(Queued {
                sample: sample.clone(),
                lifespan_ms,
            });
            while q.len() > depth {
                q.pop_front();
                self.stats.evicted += 1;
            }
            self.stats.enqueued += 1;
        }
        Ok(sample)
    }

    /// Drains the reader's queues, discarding samples older than their lifespan.
    pub fn take(&mut self, reader_id: ReaderId, now_ms: u64) -> Result<Vec<Sample>, BusError> {
        let reader = self.readers.get_mut(&reader_id).ok_or(BusError::UnknownReader(reader_id))?;
        let mut out = Vec::new();
        let mut stale = 0;
        for q in reader.queues.values_mut() {
            for queued in q.drain(..) {
                let age = now_ms.saturating_sub(queued.sample.sim_time_ms);
                if age <= queued.lifespan_ms {
                    out.push(queued.sample);
                } else {
                    stale += 1;
                }
            }
        }
        reader.stale += stale;
        let participant = reader.participant;
        self.stats.stale += stale;
        out.sort_by_key(|s| (s.writer_id, s.seq));
        let subject = self.participants[&participant].subject.clone();
        for s in &out {
            self.log.record(
                now_ms,
                &subject,
                LogKind::SampleDelivered,
                json!({"topic": s.topic, "writer": s.writer_id, "seq": s.seq, "reader": reader_id, "instance_key": s.instance_key}),
            );
        }
        self.stats.delivered += out.len() as u64;
        Ok(out)
    }

    /// Removes a participant from discovery and tears down its endpoints.
    /// Samples it already enqueued elsewhere stay takeable until they expire.
    pub fn revoke(&mut self, handle: ParticipantHandle, now_ms: u64) -> Result<(), BusError> {
        let p = self
            .participants
            .get_mut(&handle)
            .filter(|p| !p.revoked)
            .ok_or(BusError::UnknownParticipant(handle))?;
        p.revoked = true;
        let subject = p.subject.clone();
        let dead_writers: BTreeSet<WriterId> = self
            .writers
            .iter()
            .filter(|(_, w)| w.participant == handle)
            .map(|(id, _)| *id)
            .collect();
        let dead_readers: BTreeSet<ReaderId> = self
            .readers
            .iter()
            .filter(|(_, r)| r.participant == handle)
            .map(|(id, _)| *id)
            .collect();
        self.writers.retain(|id, _| !dead_writers.contains(id));
        self.readers.retain(|id, _| !dead_readers.contains(id));
        self.matches
            .retain(|(w, r)| !dead_writers.contains(w) && !dead_readers.contains(r));
        self.log.record(now_ms, subject, LogKind::Lifecycle, json!({"event": "revoked", "participant": handle}));
        Ok(())
    }

    pub fn is_matched(&self, w: WriterId, r: ReaderId) -> bool {
        self.matches.contains(&(w, r))
    }

    pub fn writer_topic(&self, w: WriterId) -> Option<&str> {
        self.writers.get(&w).map(|w| w.topic.as_str())
    }

    pub fn writer_qos(&self, w: WriterId) -> Option<QosProfile> {
        self.writers.get(&w).map(|w| w.qos)
    }

    pub fn writer_participant(&self, w: WriterId) -> Option<ParticipantHandle> {
        self.writers.get(&w).map(|w| w.participant)
    }

    /// Role of the participant that owns the writer (live or revoked).
    pub fn writer_role(&self, w: WriterId) -> Option<&str> {
        self.writers
            .get(&w)
            .and_then(|w| self.participant_role(w.participant))
    }

    pub fn reader_staleness(&self, r: ReaderId) -> Option<u64> {
        self.readers.get(&r).map(|r| r.stale)
    }

    pub fn reader_topic(&self, r: ReaderId) -> Option<&str> {
        self.readers.get(&r).map(|r| r.topic.as_str())
    }

    pub fn has_reader(&self, r: ReaderId) -> bool {
        self.readers.contains_key(&r)
    }

    /// Writers currently matched to the reader.
    pub fn matched_writers(&self, r: ReaderId) -> Vec<WriterId> {
        self.matches.iter().filter(|(_, rr)| *rr == r).map(|(w, _)| *w).collect()
    }
}
