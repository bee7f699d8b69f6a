use serde::{Deserialize, Serialize};

use super::qos::QosProfile;
use super::security::Credential;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeviceKind {
    InfusionPump,
    PcaPump,
    Glucometer,
    PulseOx,
    Capnometer,
    Ventilator,
    Xray,
    Ecg,
    Nibp,
    /// Heart-lung machine used during cardiopulmonary bypass.
    CpbMachine,
}

impl DeviceKind {
    pub fn is_actuator(self) -> bool {
        matches!(
            self,
            DeviceKind::InfusionPump | DeviceKind::PcaPump | DeviceKind::Ventilator | DeviceKind::Xray | DeviceKind::CpbMachine
        )
    }

    pub fn is_monitor(self) -> bool {
        !self.is_actuator()
    }

    /// Segment used in `device/<kind>/<device_id>/<stream>` topics.
    pub fn topic_segment(self) -> &'static str {
        match self {
            DeviceKind::InfusionPump => "pump",
            DeviceKind::PcaPump => "pca",
            DeviceKind::Glucometer => "glucometer",
            DeviceKind::PulseOx => "pulse_ox",
            DeviceKind::Capnometer => "capnometer",
            DeviceKind::Ventilator => "ventilator",
            DeviceKind::Xray => "xray",
            DeviceKind::Ecg => "ecg",
            DeviceKind::Nibp => "nibp",
            DeviceKind::CpbMachine => "cpb",
        }
    }
}

pub fn device_topic(kind: DeviceKind, device_id: &str, stream: &str) -> String {
    format!("device/{}/{}/{}", kind.topic_segment(), device_id, stream)
}

pub fn command_topic(device_id: &str, verb: &str) -> String {
    format!("cmd/{device_id}/{verb}")
}

pub fn is_command_topic(topic: &str) -> bool {
    topic.starts_with("cmd/")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedTopic {
    pub topic: String,
    pub qos: QosProfile,
    pub nominal_rate_ms: u64,
}

/// An equipment interface: what a device publishes and which commands it takes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub device_id: String,
    pub device_kind: DeviceKind,
    pub published_topics: Vec<PublishedTopic>,
    pub accepted_commands: Vec<String>,
    pub role: String,
    pub credential: Credential,
}

#[derive(Serialize)]
struct CanonicalDescriptor<'a> {
    device_id: &'a str,
    device_kind: DeviceKind,
    published_topics: &'a [PublishedTopic],
    accepted_commands: &'a [String],
    role: &'a str,
    subject: &'a str,
    credential_role: &'a str,
    expiry_sim_time_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum DescriptorError {
    #[error("monitoring device {0} publishes no topics")]
    NoTopics(String),
    #[error("actuating device {0} accepts no commands")]
    NoCommands(String),
}

impl DeviceDescriptor {
    /// Bytes covered by the credential MAC (everything except the MAC itself).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&CanonicalDescriptor {
            device_id: &self.device_id,
            device_kind: self.device_kind,
            published_topics: &self.published_topics,
            accepted_commands: &self.accepted_commands,
            role: &self.role,
            subject: &self.credential.subject,
            credential_role: &self.credential.role,
            expiry_sim_time_ms: self.credential.expiry_sim_time_ms,
        })
        .expect("descriptor encodes")
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.device_kind.is_monitor() && self.published_topics.is_empty() {
            return Err(DescriptorError::NoTopics(self.device_id.clone()));
        }
        if self.device_kind.is_actuator() && self.accepted_commands.is_empty() {
            return Err(DescriptorError::NoCommands(self.device_id.clone()));
        }
        Ok(())
    }

    pub fn publishes(&self, topic: &str) -> Option<&PublishedTopic> {
        self.published_topics.iter().find(|t| t.topic == topic)
    }

    pub fn accepts(&self, verb: &str) -> bool {
        self.accepted_commands.iter().any(|c| c == verb)
    }
}
