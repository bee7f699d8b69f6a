//! The physiological plant on its own: an opioid bolus and an insulin
//! infusion, stepped at the simulator's 1 s tick.

use ice_core::patient::{step, PatientInputs, PatientRecord, PatientState, PlantParams};

fn main() {
    let record = PatientRecord::default();
    let mut params = PlantParams::default();
    // Same glucose tuning as the shipped glucose scenarios.
    params.glucose.basal_glucose = 180.0;
    params.glucose.k_si = 2e-5;
    params.glucose.k_dec = 0.012;
    let mut state = PatientState::baseline(&params);
    state.glucose = 220.0;

    println!("{:>6} {:>8} {:>8} {:>7} {:>6} {:>6} {:>6}", "min", "glucose", "Ce", "RR", "SpO2", "EtCO2", "alive");
    for second in 0..=(90 * 60) {
        if second % 600 == 0 {
            println!(
                "{:>6} {:>8.1} {:>8.3} {:>7.1} {:>6.1} {:>6.1} {:>6}",
                second / 60,
                state.glucose,
                state.opioid_effect,
                state.resp_rate,
                state.spo2,
                state.etco2,
                state.alive
            );
        }
        let inputs = PatientInputs {
            insulin_rate: 3.0,
            // A large bolus at the start, nothing afterwards.
            opioid_bolus: if second == 0 { 150.0 } else { 0.0 },
            ..Default::default()
        };
        state = step(&state, &record, &params, &inputs, 1000);
    }
}
