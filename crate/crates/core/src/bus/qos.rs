use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reliability {
    BestEffort,
    Reliable,
}

/// Delivery contract attached to every writer (offered) and reader (requested).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QosProfile {
    pub reliability: Reliability,
    /// Maximum gap between consecutive samples, in ms.
    pub deadline_ms: u64,
    /// How long a sample stays valid after its timestamp, in ms.
    pub lifespan_ms: u64,
    /// Samples retained per instance on the reader side.
    pub history_depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("invalid QoS profile: {field} must be >= 1")]
pub struct InvalidQos {
    pub field: &'static str,
}

impl QosProfile {
    pub const fn new(reliability: Reliability, deadline_ms: u64, lifespan_ms: u64, history_depth: usize) -> Self {
        Self {
            reliability,
            deadline_ms,
            lifespan_ms,
            history_depth,
        }
    }

    pub const fn reliable(deadline_ms: u64, lifespan_ms: u64, history_depth: usize) -> Self {
        Self::new(Reliability::Reliable, deadline_ms, lifespan_ms, history_depth)
    }

    pub const fn best_effort(deadline_ms: u64, lifespan_ms: u64, history_depth: usize) -> Self {
        Self::new(Reliability::BestEffort, deadline_ms, lifespan_ms, history_depth)
    }

    pub fn validate(&self) -> Result<(), InvalidQos> {
        if self.deadline_ms < 1 {
            return Err(InvalidQos { field: "deadline_ms" });
        }
        if self.lifespan_ms < 1 {
            return Err(InvalidQos { field: "lifespan_ms" });
        }
        if self.history_depth < 1 {
            return Err(InvalidQos { field: "history_depth" });
        }
        Ok(())
    }
}

/// Request/offer compatibility.
///
/// Reliability and deadline decide the match. Lifespan and history never
/// block it; they are enforced at delivery time.
pub fn match_qos(offered: &QosProfile, requested: &QosProfile) -> bool {
    let reliability_ok =
        offered.reliability == Reliability::Reliable || requested.reliability == Reliability::BestEffort;
    reliability_ok && offered.deadline_ms <= requested.deadline_ms
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reliable_satisfies_best_effort() {
        let offered = QosProfile::reliable(100, 500, 8);
        let requested = QosProfile::best_effort(100, 500, 8);
        assert!(match_qos(&offered, &requested));
    }

    #[test]
    fn best_effort_cannot_satisfy_reliable() {
        let offered = QosProfile::best_effort(100, 500, 8);
        let requested = QosProfile::reliable(100, 500, 8);
        assert!(!match_qos(&offered, &requested));
    }

    #[test]
    fn lifespan_and_history_do_not_block() {
        let offered = QosProfile::reliable(100, 1, 1);
        let requested = QosProfile::reliable(100, 10_000, 64);
        assert!(match_qos(&offered, &requested));
    }

    #[test]
    fn zero_fields_are_invalid() {
        assert_eq!(QosProfile::reliable(0, 1, 1).validate(), Err(InvalidQos { field: "deadline_ms" }));
        assert_eq!(QosProfile::reliable(1, 0, 1).validate(), Err(InvalidQos { field: "lifespan_ms" }));
        assert_eq!(QosProfile::reliable(1, 1, 0).validate(), Err(InvalidQos { field: "history_depth" }));
    }

    fn profile() -> impl Strategy<Value = QosProfile> {
        (any::<bool>(), 1u64..5_000, 1u64..5_000, 1usize..32).prop_map(|(r, d, l, h)| {
            QosProfile::new(if r { Reliability::Reliable } else { Reliability::BestEffort }, d, l, h)
        })
    }

    proptest! {
        #[test]
        fn self_match_always_holds(p in profile()) {
            prop_assert!(match_qos(&p, &p));
        }

        #[test]
        fn tighter_offer_never_loses_a_match(o in profile(), r in profile(), tighten in 0u64..100) {
            let better = QosProfile {
                reliability: Reliability::Reliable,
                deadline_ms: o.deadline_ms.saturating_sub(tighten).max(1),
                ..o
            };
            prop_assert!(!match_qos(&o, &r) || match_qos(&better, &r));
        }
    }
}
