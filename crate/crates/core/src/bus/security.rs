//! Mock PKI and topic access control.
//!
//! Credentials carry an HMAC-SHA-256 tag keyed by a single registry secret.
//! Device credentials cover the canonical descriptor bytes; app and clinician
//! credentials cover only their own identity fields.

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::descriptor::DeviceDescriptor;

type HmacSha256 = Hmac<Sha256>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub subject: String,
    pub role: String,
    pub expiry_sim_time_ms: u64,
    /// Hex-encoded authentication tag.
    #[serde(default)]
    pub mac: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthFailure {
    BadMac,
    Expired,
    SubjectMismatch,
    RoleMismatch,
}

impl std::fmt::Display for AuthFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AuthFailure::BadMac => "bad mac",
            AuthFailure::Expired => "credential expired",
            AuthFailure::SubjectMismatch => "credential subject does not match descriptor",
            AuthFailure::RoleMismatch => "credential role does not match descriptor",
        })
    }
}

impl Credential {
    pub fn unsigned(subject: impl Into<String>, role: impl Into<String>, expiry_sim_time_ms: u64) -> Self {
        Self {
            subject: subject.into(),
            role: role.into(),
            expiry_sim_time_ms,
            mac: String::new(),
        }
    }

    fn identity_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&(&self.subject, &self.role, self.expiry_sim_time_ms)).expect("identity encodes")
    }

    pub fn is_expired(&self, now_ms: u64) -> bool {
        self.expiry_sim_time_ms < now_ms
    }
}

fn tag(key: &[u8], body: &[u8]) -> String {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(body);
    hex::encode(mac.finalize().into_bytes())
}

fn tag_matches(key: &[u8], body: &[u8], mac_hex: &str) -> bool {
    let Ok(raw) = hex::decode(mac_hex) else {
        return false;
    };
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(body);
    mac.verify_slice(&raw).is_ok()
}

/// Holder of the registry secret; mints and checks credentials.
#[derive(Clone)]
pub struct CredentialAuthority {
    key: Vec<u8>,
}

impl std::fmt::Debug for CredentialAuthority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CredentialAuthority").finish_non_exhaustive()
    }
}

impl CredentialAuthority {
    pub fn new(key: impl Into<Vec<u8>>) -> Self {
        Self { key: key.into() }
    }

    pub fn sign_descriptor(&self, descriptor: &mut DeviceDescriptor) {
        descriptor.credential.mac = tag(&self.key, &descriptor.canonical_bytes());
    }

    pub fn issue(&self, subject: impl Into<String>, role: impl Into<String>, expiry_sim_time_ms: u64) -> Credential {
        let mut c = Credential::unsigned(subject, role, expiry_sim_time_ms);
        c.mac = tag(&self.key, &c.identity_bytes());
        c
    }

    pub fn verify_descriptor(&self, d: &DeviceDescriptor, now_ms: u64) -> Result<(), AuthFailure> {
        if !tag_matches(&self.key, &d.canonical_bytes(), &d.credential.mac) {
            return Err(AuthFailure::BadMac);
        }
        if d.credential.subject != d.device_id {
            return Err(AuthFailure::SubjectMismatch);
        }
        if d.credential.role != d.role {
            return Err(AuthFailure::RoleMismatch);
        }
        if d.credential.is_expired(now_ms) {
            return Err(AuthFailure::Expired);
        }
        Ok(())
    }

    pub fn verify(&self, c: &Credential, now_ms: u64) -> Result<(), AuthFailure> {
        if !tag_matches(&self.key, &c.identity_bytes(), &c.mac) {
            return Err(AuthFailure::BadMac);
        }
        if c.is_expired(now_ms) {
            return Err(AuthFailure::Expired);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Publish,
    Subscribe,
    Command,
}

/// Only ALLOW rules exist; anything unmatched is denied.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRule {
    pub role: String,
    /// Exact topic, or a prefix ending in `*`.
    pub topic_pattern: String,
    pub action: Action,
}

impl AccessRule {
    pub fn allow(role: impl Into<String>, topic_pattern: impl Into<String>, action: Action) -> Self {
        Self {
            role: role.into(),
            topic_pattern: topic_pattern.into(),
            action,
        }
    }
}

pub fn topic_matches(pattern: &str, topic: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => topic.starts_with(prefix),
        None => pattern == topic,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessPolicy {
    pub rules: Vec<AccessRule>,
}

impl AccessPolicy {
    pub fn new(rules: Vec<AccessRule>) -> Self {
        Self { rules }
    }

    pub fn allows(&self, role: &str, topic: &str, action: Action) -> bool {
        self.rules
            .iter()
            .any(|r| r.role == role && r.action == action && topic_matches(&r.topic_pattern, topic))
    }
}
