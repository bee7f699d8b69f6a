mod common;

use common::*;
use ice_core::patient::{step, PatientInputs, PatientRecord, PatientState, PlantParams};
use proptest::prelude::*;

#[test]
fn euler_tracks_rk4_on_every_shipped_scenario() {
    for name in SHIPPED {
        let spec = load(name);
        let records = run(&spec, None);
        let gap = oracle_gap(&spec, &records);
        assert!(gap.ticks > 100, "{name}: only {} ticks", gap.ticks);
        assert!(gap.glucose <= 2.0, "{name}: glucose gap {:.4} mg/dl", gap.glucose);
        assert!(gap.resp_rate <= 0.5, "{name}: resp rate gap {:.4} /min", gap.resp_rate);
    }
}

#[test]
fn oracle_matches_closed_form_insulin_decay() {
    // With no glucose dynamics involved, I(t) = I0 exp(-k_dec t) exactly.
    let params = PlantParams::default();
    let record = PatientRecord::default();
    let mut s = PatientState::baseline(&params);
    s.insulin_effect = 100.0;
    let mut o = Rk4Plant::new(&s, &record, &params);
    o.advance(&PatientInputs::default(), 600_000);
    let exact = 100.0 * (-params.glucose.k_dec * 10.0).exp();
    approx::assert_relative_eq!(o.i, exact, max_relative = 1e-9);
}

#[test]
fn oracle_matches_closed_form_plasma_washout() {
    let params = PlantParams::default();
    let mut o = Rk4Plant::new(&PatientState::baseline(&params), &PatientRecord::default(), &params);
    o.advance(
        &PatientInputs {
            opioid_bolus: 300.0,
            ..Default::default()
        },
        1_000_000,
    );
    let exact = 300.0 / params.opioid.vd_l * (-params.opioid.ke_per_s * 1000.0).exp();
    approx::assert_relative_eq!(o.cp, exact, max_relative = 1e-9);
}

/// Glucose never rises when insulin is raised pointwise, all else equal.
#[test]
fn insulin_dose_response_is_monotone() {
    let bad = dose_response_violations(1000, 0xD05E);
    assert!(bad.is_empty(), "{bad:?}");
}

fn arb_state() -> impl Strategy<Value = PatientState> {
    (
        1.0..600.0f64,
        0.0..5000.0f64,
        0.0..200.0f64,
        0.0..200.0f64,
        0.0..100.0f64,
        0.0..120.0f64,
        any::<bool>(),
        any::<bool>(),
        0u64..200_000,
    )
        .prop_map(|(g, i, cp, ce, spo2, etco2, ventilated, on_bypass, hypoxic_ms)| PatientState {
            glucose: g,
            insulin_effect: i,
            opioid_plasma: cp,
            opioid_effect: ce,
            spo2,
            etco2,
            resp_rate: 10.0,
            heart_rate: 70.0,
            ventilated,
            on_bypass,
            alive: true,
            hypoxic_ms,
        })
}

fn arb_inputs() -> impl Strategy<Value = PatientInputs> {
    (0.0..20.0f64, 0.0..1000.0f64, 0.0..500.0f64, any::<bool>(), any::<bool>()).prop_map(|(ins, dex, bolus, vent, cpb)| {
        PatientInputs {
            insulin_rate: ins,
            dextrose_rate: dex,
            opioid_bolus: bolus,
            ventilator_on: vent,
            cpb_active: cpb,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100_000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn one_step_stays_physical(s in arb_state(), u in arb_inputs(), dt in 100u64..=60_000, spont in any::<bool>()) {
        let mut params = PlantParams::default();
        params.gas.spontaneous_breathing = spont;
        let n = step(&s, &PatientRecord::default(), &params, &u, dt);
        for v in [n.glucose, n.insulin_effect, n.opioid_plasma, n.opioid_effect, n.spo2, n.etco2, n.resp_rate, n.heart_rate] {
            prop_assert!(v.is_finite());
        }
        prop_assert!(n.glucose >= 1.0);
        prop_assert!(n.insulin_effect >= 0.0 && n.opioid_plasma >= 0.0 && n.opioid_effect >= 0.0);
        prop_assert!((0.0..=100.0).contains(&n.spo2));
        prop_assert!(n.etco2 <= params.gas.etco2_max.max(s.etco2) + 1e-9);
        prop_assert!(n.resp_rate >= 0.0 && n.resp_rate <= params.opioid.rr0.max(params.gas.ventilator_rate));
        prop_assert_eq!(n.ventilated, u.ventilator_on);
        prop_assert_eq!(n.on_bypass, u.cpb_active);
    }
}
