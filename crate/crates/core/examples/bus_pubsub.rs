//! Discovery, QoS matching and delivery on the bedside bus.

use ice_core::bus::{
    match_qos, Bus, BusConfig, Credential, CredentialAuthority, DeviceDescriptor, DeviceKind, ParticipantKind,
    PublishedTopic, QosProfile,
};
use ice_core::bus::payload_of;
use ice_core::logger::LogKind;
use ice_core::scenario::default_policy;

const KEY: &[u8] = b"ward-7-registry";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let authority = CredentialAuthority::new(KEY.to_vec());
    let mut bus = Bus::new(BusConfig::default(), authority.clone(), default_policy());

    let topic = "device/pulse_ox/po-1/spo2";
    let offered = QosProfile::reliable(1000, 5000, 8);
    let mut oximeter = DeviceDescriptor {
        device_id: "po-1".into(),
        device_kind: DeviceKind::PulseOx,
        published_topics: vec![PublishedTopic {
            topic: topic.into(),
            qos: offered,
            nominal_rate_ms: 1000,
        }],
        accepted_commands: vec![],
        role: "device".into(),
        credential: Credential::unsigned("po-1", "device", u64::MAX),
    };
    authority.sign_descriptor(&mut oximeter);

    let dev = bus.register_participant(&oximeter, 50)?;
    println!("visible at t=50:  {:?}", bus.discover(50).iter().map(|d| &d.device_id).collect::<Vec<_>>());
    println!("visible at t=100: {:?}", bus.discover(100).iter().map(|d| &d.device_id).collect::<Vec<_>>());
    let writer = bus.create_writer(dev, topic, offered, 100)?;

    let app_cred = authority.issue("monitor", "app", u64::MAX);
    let app = bus.register_identity(&app_cred, ParticipantKind::App { app_id: "monitor".into() }, 100)?;
    let relaxed = QosProfile::best_effort(2000, 5000, 4);
    let strict = QosProfile::reliable(500, 5000, 4);
    let r_ok = bus.create_reader(app, topic, relaxed, 100)?;
    let r_bad = bus.create_reader(app, topic, strict, 100)?;
    println!("offered {offered:?}");
    println!("  vs relaxed reader: match={}", match_qos(&offered, &relaxed));
    println!("  vs strict reader:  match={}", match_qos(&offered, &strict));

    for t in [1000, 2000, 3000] {
        bus.publish(writer, payload_of([("spo2", 97.0, "%")]), t)?;
    }
    let got = bus.take(r_ok, 3000)?;
    let none = bus.take(r_bad, 3000)?;
    println!("relaxed reader took {} samples, strict reader took {}", got.len(), none.len());
    for s in &got {
        println!("  {} seq {} spo2={:?}", s.topic, s.seq, s.value("spo2"));
    }
    let warnings = bus.log().records().iter().filter(|r| r.kind == LogKind::Security).count();
    println!("security records: {warnings}; stats {:?}", bus.stats());
    Ok(())
}
