//! Minimal physiologic plant: glucose/insulin, opioid PK/PD with a Hill
//! respiratory-depression curve, and oxygenation/CO2/heart-rate relaxation.
//!
//! All dynamics are forward Euler at the simulation tick except the first-order
//! relaxations in gas exchange, which use the exact exponential factor so the
//! result does not depend on the step size.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{Measurement, Payload};

pub const MIN_DT_MS: u64 = 100;
pub const MAX_DT_MS: u64 = 60_000;

#[derive(Debug, Error, PartialEq)]
pub enum PatientError {
    #[error("invalid patient record: {0}")]
    InvalidRecord(&'static str),
    #[error("invalid patient input: {0} must be non-negative and finite")]
    InvalidInput(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub weight_kg: f64,
    /// mg/dl
    pub target_glucose_low: f64,
    /// mg/dl
    pub target_glucose_high: f64,
    /// U/hr
    pub basal_insulin_rate: f64,
    /// mg/dl lowered per U
    pub correction_factor: f64,
    /// g carbohydrate per U
    pub insulin_carb_ratio: f64,
    /// U/hr
    pub max_insulin_rate: f64,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<(), PatientError> {
        let positive = [
            (self.weight_kg, "weight_kg"),
            (self.basal_insulin_rate, "basal_insulin_rate"),
            (self.correction_factor, "correction_factor"),
            (self.insulin_carb_ratio, "insulin_carb_ratio"),
            (self.max_insulin_rate, "max_insulin_rate"),
        ];
        for (v, name) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PatientError::InvalidRecord(name));
            }
        }
        if self.target_glucose_low.partial_cmp(&self.target_glucose_high) != Some(std::cmp::Ordering::Less) {
            return Err(PatientError::InvalidRecord("target_glucose_low must be below target_glucose_high"));
        }
        Ok(())
    }
}

impl Default for PatientRecord {
    fn default() -> Self {
        Self {
            patient_id: "patient-1".into(),
            weight_kg: 70.0,
            target_glucose_low: 80.0,
            target_glucose_high: 180.0,
            basal_insulin_rate: 1.0,
            correction_factor: 50.0,
            insulin_carb_ratio: 10.0,
            max_insulin_rate: 6.0,
        }
    }
}

/// Two-state glucose model, time in minutes:
///
/// ```text
/// dG/dt = k_egp (Gb - G) - k_si I G + u_dex / V_g
/// dI/dt = -k_dec I + k_abs u_ins
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlucoseParams {
    /// Gb, mg/dl.
    pub basal_glucose: f64,
    /// 1/min
    pub k_egp: f64,
    /// 1/min per mU/L
    pub k_si: f64,
    /// 1/min
    pub k_dec: f64,
    /// mU/L/min of insulin effect per U/hr infused.
    pub k_abs: f64,
    /// Glucose distribution volume, dl per kg.
    pub vg_dl_per_kg: f64,
}

impl Default for GlucoseParams {
    fn default() -> Self {
        Self {
            basal_glucose: 110.0,
            k_egp: 0.01,
            k_si: 0.0004,
            k_dec: 0.025,
            k_abs: 10.0,
            vg_dl_per_kg: 0.16,
        }
    }
}

/// One-compartment plasma plus effect site, time in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpioidParams {
    pub vd_l: f64,
    pub ke_per_s: f64,
    pub ke0_per_s: f64,
    /// Drug-free respiratory rate, breaths/min.
    pub rr0: f64,
    pub emax: f64,
    /// µg/L
    pub ce50: f64,
    pub gamma: f64,
}

impl Default for OpioidParams {
    fn default() -> Self {
        Self {
            vd_l: 30.0,
            ke_per_s: 0.00012,
            ke0_per_s: 0.0015,
            rr0: 14.0,
            emax: 0.9,
            ce50: 3.5,
            gamma: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GasParams {
    pub spo2_tau_s: f64,
    pub spo2_oxygenated: f64,
    pub spo2_hypoxic: f64,
    /// Spontaneous rate at or above which oxygenation is adequate.
    pub rr_adequate: f64,
    /// Spontaneous rate at or below which oxygenation heads to `spo2_hypoxic`.
    pub rr_inadequate: f64,
    pub etco2_baseline: f64,
    /// mmHg added per breath/min below `rr_adequate`.
    pub etco2_per_missing_breath: f64,
    pub etco2_rise_per_s: f64,
    pub etco2_tau_s: f64,
    pub etco2_max: f64,
    pub hr_baseline: f64,
    pub hr_brady: f64,
    pub hr_tau_s: f64,
    pub brady_below_spo2: f64,
    pub death_below_spo2: f64,
    pub death_after_ms: u64,
    pub ventilator_rate: f64,
    /// False for anesthetized, paralyzed patients who only breathe on the ventilator.
    pub spontaneous_breathing: bool,
}

impl Default for GasParams {
    fn default() -> Self {
        Self {
            spo2_tau_s: 45.0,
            spo2_oxygenated: 98.0,
            spo2_hypoxic: 60.0,
            rr_adequate: 8.0,
            rr_inadequate: 4.0,
            etco2_baseline: 38.0,
            etco2_per_missing_breath: 4.0,
            etco2_rise_per_s: 0.4,
            etco2_tau_s: 30.0,
            etco2_max: 120.0,
            hr_baseline: 75.0,
            hr_brady: 30.0,
            hr_tau_s: 30.0,
            brady_below_spo2: 70.0,
            death_below_spo2: 65.0,
            death_after_ms: 120_000,
            ventilator_rate: 12.0,
            spontaneous_breathing: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    pub glucose: GlucoseParams,
    pub opioid: OpioidParams,
    pub gas: GasParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientState {
    /// mg/dl
    pub glucose: f64,
    /// Effective plasma insulin, mU/L.
    pub insulin_effect: f64,
    /// µg/L
    pub opioid_plasma: f64,
    /// Effect-site concentration, µg/L.
    pub opioid_effect: f64,
    pub spo2: f64,
    pub etco2: f64,
    pub resp_rate: f64,
    pub heart_rate: f64,
    pub ventilated: bool,
    pub on_bypass: bool,
    pub alive: bool,
    /// Continuous time spent below the fatal SpO2 threshold.
    pub hypoxic_ms: u64,
}

impl PatientState {
    pub fn baseline(params: &PlantParams) -> Self {
        Self {
            glucose: params.glucose.basal_glucose,
            insulin_effect: 0.0,
            opioid_plasma: 0.0,
            opioid_effect: 0.0,
            spo2: params.gas.spo2_oxygenated,
            etco2: params.gas.etco2_baseline,
            resp_rate: if params.gas.spontaneous_breathing { params.opioid.rr0 } else { 0.0 },
            heart_rate: params.gas.hr_baseline,
            ventilated: false,
            on_bypass: false,
            alive: true,
            hypoxic_ms: 0,
        }
    }

    /// Starts on the ventilator at its set rate.
    pub fn ventilated(params: &PlantParams) -> Self {
        Self {
            ventilated: true,
            resp_rate: params.gas.ventilator_rate,
            ..Self::baseline(params)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientInputs {
    /// U/hr
    pub insulin_rate: f64,
    /// mg/min
    pub dextrose_rate: f64,
    /// µg delivered as an impulse this tick.
    pub opioid_bolus: f64,
    pub ventilator_on: bool,
    pub cpb_active: bool,
}

impl PatientInputs {
    pub fn validate(&self) -> Result<(), PatientError> {
        for (v, name) in [
            (self.insulin_rate, "insulin_rate"),
            (self.dextrose_rate, "dextrose_rate"),
            (self.opioid_bolus, "opioid_bolus"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PatientError::InvalidInput(name));
            }
        }
        Ok(())
    }

    /// Sums rates and ORs support flags.
    pub fn combine(self, other: PatientInputs) -> PatientInputs {
        PatientInputs {
            insulin_rate: self.insulin_rate + other.insulin_rate,
            dextrose_rate: self.dextrose_rate + other.dextrose_rate,
            opioid_bolus: self.opioid_bolus + other.opioid_bolus,
            ventilator_on: self.ventilator_on || other.ventilator_on,
            cpb_active: self.cpb_active || other.cpb_active,
        }
    }
}

fn clamp_dt(dt_ms: u64) -> u64 {
    dt_ms.clamp(MIN_DT_MS, MAX_DT_MS)
}

/// Glucose distribution volume in dl.
pub fn glucose_volume_dl(record: &PatientRecord, params: &GlucoseParams) -> f64 {
    params.vg_dl_per_kg * record.weight_kg
}

pub fn glucose_step(state: &PatientState, record: &PatientRecord, params: &GlucoseParams, inputs: &PatientInputs, dt_ms: u64) -> PatientState {
    let dt = clamp_dt(dt_ms) as f64 / 60_000.0;
    let (g, i) = (state.glucose, state.insulin_effect);
    let dg = params.k_egp * (params.basal_glucose - g) - params.k_si * i * g
        + inputs.dextrose_rate / glucose_volume_dl(record, params);
    let di = -params.k_dec * i + params.k_abs * inputs.insulin_rate;
    PatientState {
        glucose: (g + dt * dg).max(1.0),
        insulin_effect: (i + dt * di).max(0.0),
        ..state.clone()
    }
}

/// Respiratory rate under the Hill depression curve.
pub fn hill_resp_rate(effect_site: f64, params: &OpioidParams) -> f64 {
    let c = effect_site.max(0.0).powf(params.gamma);
    let c50 = params.ce50.powf(params.gamma);
    params.rr0 * (1.0 - params.emax * c / (c50 + c))
}

/// Respiratory rate actually achieved given ventilatory support.
pub fn effective_resp_rate(state: &PatientState, params: &PlantParams) -> f64 {
    if state.ventilated {
        params.gas.ventilator_rate
    } else if params.gas.spontaneous_breathing {
        hill_resp_rate(state.opioid_effect, &params.opioid)
    } else {
        0.0
    }
}

pub fn opioid_step(state: &PatientState, params: &PlantParams, inputs: &PatientInputs, dt_ms: u64) -> PatientState {
    let dt = clamp_dt(dt_ms) as f64 / 1000.0;
    let p = &params.opioid;
    let cp = state.opioid_plasma + inputs.opioid_bolus / p.vd_l;
    let ce = state.opioid_effect;
    let mut next = PatientState {
        opioid_plasma: (cp - dt * p.ke_per_s * cp).max(0.0),
        opioid_effect: (ce + dt * p.ke0_per_s * (cp - ce)).max(0.0),
        ventilated: inputs.ventilator_on,
        on_bypass: inputs.cpb_active,
        ..state.clone()
    };
    next.resp_rate = effective_resp_rate(&next, params);
    next
}

fn relax(value: f64, target: f64, dt_s: f64, tau_s: f64) -> f64 {
    value + (target - value) * (1.0 - (-dt_s / tau_s).exp())
}

pub fn spo2_target(state: &PatientState, gas: &GasParams) -> f64 {
    if state.on_bypass || state.ventilated {
        return gas.spo2_oxygenated;
    }
    let span = (gas.rr_adequate - gas.rr_inadequate).max(f64::EPSILON);
    let frac = ((state.resp_rate - gas.rr_inadequate) / span).clamp(0.0, 1.0);
    gas.spo2_hypoxic + (gas.spo2_oxygenated - gas.spo2_hypoxic) * frac
}

pub fn gas_exchange_step(state: &PatientState, params: &GasParams, dt_ms: u64) -> PatientState {
    let dt_ms = clamp_dt(dt_ms);
    let dt = dt_ms as f64 / 1000.0;
    let mut next = state.clone();
    next.spo2 = relax(state.spo2, spo2_target(state, params), dt, params.spo2_tau_s).clamp(0.0, 100.0);

    let apneic = !state.ventilated && state.resp_rate < 1.0;
    next.etco2 = if apneic {
        (state.etco2 + params.etco2_rise_per_s * dt).min(params.etco2_max)
    } else {
        let target = params.etco2_baseline
            + params.etco2_per_missing_breath * (params.rr_adequate - state.resp_rate).max(0.0);
        relax(state.etco2, target, dt, params.etco2_tau_s)
    };

    let hr_target = if next.spo2 < params.brady_below_spo2 { params.hr_brady } else { params.hr_baseline };
    next.heart_rate = relax(state.heart_rate, hr_target, dt, params.hr_tau_s);

    if state.alive {
        if next.spo2 < params.death_below_spo2 {
            next.hypoxic_ms = state.hypoxic_ms + dt_ms;
            if next.hypoxic_ms >= params.death_after_ms {
                next.alive = false;
            }
        } else {
            next.hypoxic_ms = 0;
        }
    }
    next
}

/// One full plant tick: glucose, then opioid and support flags, then gas exchange.
pub fn step(state: &PatientState, record: &PatientRecord, params: &PlantParams, inputs: &PatientInputs, dt_ms: u64) -> PatientState {
    let s = glucose_step(state, record, &params.glucose, inputs, dt_ms);
    let s = opioid_step(&s, params, inputs, dt_ms);
    gas_exchange_step(&s, &params.gas, dt_ms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSigmas {
    pub glucose: f64,
    pub spo2: f64,
    pub etco2: f64,
    pub resp_rate: f64,
    pub heart_rate: f64,
    pub temperature: f64,
    pub blood_pressure: f64,
}

impl Default for NoiseSigmas {
    fn default() -> Self {
        Self {
            glucose: 2.0,
            spo2: 0.5,
            etco2: 1.0,
            resp_rate: 0.3,
            heart_rate: 1.0,
            temperature: 0.05,
            blood_pressure: 2.0,
        }
    }
}

impl NoiseSigmas {
    pub fn zero() -> Self {
        Self {
            glucose: 0.0,
            spo2: 0.0,
            etco2: 0.0,
            resp_rate: 0.0,
            heart_rate: 0.0,
            temperature: 0.0,
            blood_pressure: 0.0,
        }
    }
}

const CHANNELS: [&str; 8] = [
    "glucose",
    "spo2",
    "etco2",
    "resp_rate",
    "heart_rate",
    "temperature",
    "systolic",
    "diastolic",
];

/// Noisy vital-sign source with one independent random stream per channel.
#[derive(Clone, Debug)]
pub struct VitalsEmitter {
    sigmas: NoiseSigmas,
    streams: BTreeMap<&'static str, ChaCha8Rng>,
}

impl VitalsEmitter {
    pub fn new(seed: u64, sigmas: NoiseSigmas) -> Self {
        let streams = CHANNELS
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                (*name, rng)
            })
            .collect();
        Self { sigmas, streams }
    }

    fn noise(&mut self, channel: &'static str, sigma: f64) -> f64 {
        let rng = self.streams.get_mut(channel).expect("known channel");
        let z: f64 = StandardNormal.sample(rng);
        z * sigma
    }

    /// Measured vitals for the current state; the timestamp is informational.
    pub fn emit(&mut self, state: &PatientState, _now_ms: u64) -> Payload {
        let s = self.sigmas.clone();
        let mut p = Payload::new();
        let mut put = |name: &str, value: f64, unit: &str| {
            p.insert(name.to_string(), Measurement::new(value, unit));
        };
        put("glucose", (state.glucose + self.noise("glucose", s.glucose)).max(1.0), "mg/dl");
        put("spo2", (state.spo2 + self.noise("spo2", s.spo2)).clamp(0.0, 100.0), "%");
        put("etco2", (state.etco2 + self.noise("etco2", s.etco2)).max(0.0), "mmHg");
        put("resp_rate", (state.resp_rate + self.noise("resp_rate", s.resp_rate)).max(0.0), "/min");
        put("heart_rate", (state.heart_rate + self.noise("heart_rate", s.heart_rate)).max(0.0), "bpm");
        put("temperature", 37.0 + self.noise("temperature", s.temperature), "degC");
        put("systolic", 120.0 + self.noise("systolic", s.blood_pressure), "mmHg");
        put("diastolic", 80.0 + self.noise("diastolic", s.blood_pressure), "mmHg");
        p
    }
}
