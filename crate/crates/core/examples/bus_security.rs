//! Credential checks and the ALLOW-only access policy.

use ice_core::bus::{
    Bus, BusConfig, Credential, CredentialAuthority, DeviceDescriptor, DeviceKind, PublishedTopic, QosProfile,
};
use ice_core::logger::LogKind;
use ice_core::scenario::default_policy;

fn oximeter(id: &str, role: &str) -> DeviceDescriptor {
    DeviceDescriptor {
        device_id: id.into(),
        device_kind: DeviceKind::PulseOx,
        published_topics: vec![PublishedTopic {
            topic: format!("device/pulse_ox/{id}/spo2"),
            qos: QosProfile::reliable(1000, 5000, 8),
            nominal_rate_ms: 1000,
        }],
        accepted_commands: vec![],
        role: role.into(),
        credential: Credential::unsigned(id, role, 60_000),
    }
}

fn main() {
    let registry = CredentialAuthority::new(b"hospital-registry".to_vec());
    let rogue = CredentialAuthority::new(b"someone-else".to_vec());
    let mut bus = Bus::new(BusConfig::default(), registry.clone(), default_policy());

    let mut good = oximeter("po-1", "device");
    registry.sign_descriptor(&mut good);
    let mut forged = oximeter("po-2", "device");
    rogue.sign_descriptor(&mut forged);
    let mut visitor = oximeter("po-3", "visitor");
    registry.sign_descriptor(&mut visitor);

    for d in [&good, &forged, &visitor] {
        let topic = &d.published_topics[0].topic;
        let outcome = bus
            .register_participant(d, 0)
            .and_then(|h| bus.create_writer(h, topic, d.published_topics[0].qos, 0));
        match outcome {
            Ok(w) => println!("{}: publishing on {topic} as {w:?}", d.device_id),
            Err(e) => println!("{}: refused ({e})", d.device_id),
        }
    }

    // Credentials carry an expiry in simulated time.
    match bus.register_participant(&good, 120_000) {
        Ok(_) => println!("po-1 re-registered after expiry"),
        Err(e) => println!("po-1 at t=120 s: {e}"),
    }

    println!("\nsecurity log:");
    for r in bus.log().records().iter().filter(|r| r.kind == LogKind::Security) {
        println!("  #{} {} {}", r.seq, r.actor, r.payload);
    }
}
