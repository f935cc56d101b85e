//! Synthetic rolled multilayer actuator: quasi-static electromechanical
//! response, capacitance, and seeded wear-out/breakdown degradation.
//!
//! All randomness comes from a ChaCha8 stream keyed by the device seed and a
//! per-step counter, so any state trajectory replays bit-for-bit.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Weibull};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Calibration;

/// Vacuum permittivity, F/m.
const EPSILON_0: f64 = 8.854_187_8128e-12;

/// Lower and upper probe frequency of an impedance sweep, Hz.
pub const PROBE_MIN_HZ: f64 = 1.0e3;
pub const PROBE_MAX_HZ: f64 = 1.0e6;

/// Filtration area the CNT concentration is normalized to, cm².
pub const FILTRATION_AREA_CM2: f64 = 50.24;

/// Baseline electrode concentration, mL/FA.
pub const BASELINE_CNT: f64 = 2.5;

#[derive(Debug, Error, PartialEq)]
pub enum DeviceError {
    #[error("probe frequency {0} Hz outside sweep range [1 kHz, 1 MHz]")]
    ProbeRange(f64),
    #[error("invalid device spec: {0}")]
    InvalidSpec(String),
    #[error("unknown filler `{0}` (expected LM, CB or CG)")]
    UnknownFiller(String),
}

/// Conductive filler at the electrical connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Filler {
    /// Liquid metal.
    LM,
    /// Carbon black / PDMS mixture (baseline).
    CB,
    /// Carbon grease.
    CG,
}

impl Filler {
    pub const ALL: [Filler; 3] = [Filler::LM, Filler::CB, Filler::CG];

    pub fn as_str(self) -> &'static str {
        match self {
            Filler::LM => "LM",
            Filler::CB => "CB",
            Filler::CG => "CG",
        }
    }
}

impl fmt::Display for Filler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Filler {
    type Err = DeviceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "LM" => Ok(Filler::LM),
            "CB" => Ok(Filler::CB),
            "CG" => Ok(Filler::CG),
            _ => Err(DeviceError::UnknownFiller(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialConfig {
    pub filler: Filler,
    /// CNT electrode concentration, mL/FA.
    pub cnt_conc: f64,
}

impl MaterialConfig {
    pub fn new(filler: Filler, cnt_conc: f64) -> Result<Self, DeviceError> {
        let m = Self { filler, cnt_conc };
        m.validate()?;
        Ok(m)
    }

    /// CB filler at 2.5 mL/FA.
    pub fn baseline() -> Self {
        Self {
            filler: Filler::CB,
            cnt_conc: BASELINE_CNT,
        }
    }

    pub fn is_baseline(&self) -> bool {
        *self == Self::baseline()
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        if !(1.0..=5.0).contains(&self.cnt_conc) {
            return Err(DeviceError::InvalidSpec(format!(
                "cnt_conc {} outside [1.0, 5.0] mL/FA",
                self.cnt_conc
            )));
        }
        Ok(())
    }
}

impl fmt::Display for MaterialConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.filler, self.cnt_conc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub active_layers: u32,
    /// µm
    pub layer_thickness: f64,
    /// mm
    pub active_length: f64,
    /// Electrode width of the rolled sheet, mm.
    pub electrode_width: f64,
    pub reinforced: bool,
    /// g
    pub mass: f64,
    pub material: MaterialConfig,
}

impl DeviceSpec {
    /// Ten-layer scan sample with baseline materials.
    pub fn test_sample() -> Self {
        Self {
            active_layers: 10,
            layer_thickness: 30.0,
            active_length: 10.0,
            electrode_width: 40.0,
            reinforced: false,
            mass: 1.0,
            material: MaterialConfig::baseline(),
        }
    }

    /// Twenty-layer reinforced actuator built with the optimized materials.
    pub fn scaled() -> Self {
        Self {
            active_layers: 20,
            layer_thickness: 30.0,
            active_length: 23.0,
            electrode_width: 40.0,
            reinforced: true,
            mass: 28.0 / 12.0,
            material: MaterialConfig {
                filler: Filler::CG,
                cnt_conc: 2.9,
            },
        }
    }

    pub fn with_material(mut self, material: MaterialConfig) -> Self {
        self.material = material;
        self
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.active_layers == 0 {
            return Err(DeviceError::InvalidSpec("active_layers must be >= 1".into()));
        }
        for (name, v) in [
            ("layer_thickness", self.layer_thickness),
            ("active_length", self.active_length),
            ("electrode_width", self.electrode_width),
            ("mass", self.mass),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(DeviceError::InvalidSpec(format!("{name} must be > 0")));
            }
        }
        self.material.validate()
    }

    /// Drive voltage for a field, V.
    pub fn voltage_for(&self, field: f64) -> f64 {
        field * self.layer_thickness
    }

    fn cross_section(&self) -> f64 {
        self.active_layers as f64 * self.layer_thickness * self.electrode_width
    }
}

/// Evolving degradation state of one device instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    /// Driven time, s.
    pub age: f64,
    /// Accumulated wear; 1.0 at the device's characteristic life.
    pub wear: f64,
    pub amplitude_factor: f64,
    pub capacitance_factor: f64,
    pub failed: bool,
    pub seed: u64,
    /// Number of degradation steps taken; doubles as the RNG stream counter.
    pub steps: u64,
}

impl DeviceState {
    pub fn fresh(seed: u64) -> Self {
        Self {
            age: 0.0,
            wear: 0.0,
            amplitude_factor: 1.0,
            capacitance_factor: 1.0,
            failed: false,
            seed,
            steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drive {
    /// V/µm
    pub field: f64,
    /// Hz
    pub frequency: f64,
}

impl Drive {
    pub fn new(field: f64, frequency: f64) -> Self {
        debug_assert!(field >= 0.0 && frequency > 0.0);
        Self { field, frequency }
    }
}

/// Stateless evaluator of the calibrated actuator physics.
#[derive(Debug, Clone, Default)]
pub struct DeviceModel {
    cal: Calibration,
}

impl DeviceModel {
    pub fn new(cal: Calibration) -> Self {
        Self { cal }
    }

    pub fn calibration(&self) -> &Calibration {
        &self.cal
    }

    fn raw_strain(&self, field: f64) -> f64 {
        let c = &self.cal;
        field * field * (1.0 + ((field - c.saturation_field) / c.saturation_width).tanh())
    }

    /// Axial strain of the anchor material at `field`.
    pub fn strain(&self, field: f64) -> f64 {
        if field <= 0.0 {
            return 0.0;
        }
        self.cal.anchor_strain * self.raw_strain(field) / self.raw_strain(self.cal.anchor_field)
    }

    fn cnt_bump(c: f64, peak: f64, width: f64, reference: f64) -> f64 {
        let z = (c - peak) / width;
        let z0 = (reference - peak) / width;
        (z0 * z0 - z * z).exp()
    }

    fn absolute_gain(&self, m: &MaterialConfig) -> f64 {
        let c = &self.cal;
        c.filler_gain(m.filler) * Self::cnt_bump(m.cnt_conc, c.cnt_gain_peak, c.cnt_gain_width, c.cnt_ref)
    }

    /// Strain/force gain of a material relative to the anchor material.
    pub fn material_gain(&self, m: &MaterialConfig) -> f64 {
        let anchor = MaterialConfig {
            filler: self.cal.anchor_filler,
            cnt_conc: self.cal.anchor_cnt,
        };
        self.absolute_gain(m) / self.absolute_gain(&anchor)
    }

    /// Free displacement, mm.
    pub fn displacement(&self, spec: &DeviceSpec, state: &DeviceState, field: f64) -> f64 {
        if state.failed || field <= 0.0 {
            return 0.0;
        }
        self.strain(field) * self.material_gain(&spec.material) * spec.active_length * state.amplitude_factor
    }

    /// Blocked force, N.
    pub fn blocked_force(&self, spec: &DeviceSpec, state: &DeviceState, field: f64) -> f64 {
        if state.failed || field <= 0.0 {
            return 0.0;
        }
        let c = &self.cal;
        let anchor_force = c.anchor_specific_force * c.anchor_mass;
        let anchor_section = c.anchor_layers as f64 * c.anchor_layer_thickness * c.anchor_electrode_width;
        let reinforcement = if spec.reinforced { 1.0 } else { 0.5 };
        anchor_force * (spec.cross_section() / anchor_section) * (self.strain(field) / self.strain(c.rated_field))
            * self.material_gain(&spec.material)
            * reinforcement
            * state.amplitude_factor
    }

    /// Parallel-plate capacitance of the undegraded stack, nF.
    pub fn baseline_capacitance(&self, spec: &DeviceSpec) -> f64 {
        let area_m2 = spec.electrode_width * spec.active_length * 1e-6;
        let gap_m = spec.layer_thickness * 1e-6;
        EPSILON_0 * self.cal.relative_permittivity * spec.active_layers as f64 * area_m2 / gap_m * 1e9
    }

    /// Capacitance at a probe frequency, nF.
    pub fn capacitance(&self, spec: &DeviceSpec, state: &DeviceState, probe_freq: f64) -> Result<f64, DeviceError> {
        if !(PROBE_MIN_HZ..=PROBE_MAX_HZ).contains(&probe_freq) {
            return Err(DeviceError::ProbeRange(probe_freq));
        }
        let rolloff = 1.0 - self.cal.probe_rolloff_per_decade * (probe_freq / PROBE_MIN_HZ).log10();
        Ok(self.baseline_capacitance(spec) * state.capacitance_factor * rolloff)
    }

    /// Series resistance of electrodes plus connection filler, MΩ.
    pub fn series_resistance(&self, m: &MaterialConfig) -> f64 {
        let c = &self.cal;
        c.filler_resistance(m.filler)
            + c.resistance_electrode_ref * (c.cnt_ref / m.cnt_conc).powf(c.resistance_electrode_exponent)
    }

    /// RC charging time constant of the device, s.
    pub fn time_constant(&self, spec: &DeviceSpec) -> f64 {
        // MΩ · nF = ms
        self.series_resistance(&spec.material) * self.baseline_capacitance(spec) * 1e-3
    }

    /// Position of `freq` between the low and high blend anchors, in [0, 1].
    fn frequency_blend(&self, freq: f64) -> f64 {
        let c = &self.cal;
        ((freq / c.blend_freq_low).ln() / (c.blend_freq_high / c.blend_freq_low).ln()).clamp(0.0, 1.0)
    }

    /// Characteristic (wear-out) life of the material under a drive, s.
    /// Infinite at zero field.
    pub fn characteristic_life(&self, material: &MaterialConfig, drive: &Drive) -> f64 {
        if drive.field <= 0.0 {
            return f64::INFINITY;
        }
        let c = &self.cal;
        let s = self.frequency_blend(drive.frequency);
        let (lo, hi) = c.filler_life(material.filler);
        let filler = (lo.ln() * (1.0 - s) + hi.ln() * s).exp();
        let cnt = Self::cnt_bump(material.cnt_conc, c.cnt_life_peak, c.cnt_life_width, c.cnt_ref);
        c.life_ref
            * (drive.field / c.life_field_ref).powf(-c.life_field_exponent)
            * drive.frequency.powf(c.life_freq_exponent)
            * filler
            * cnt
    }

    /// Per-device life multiplier drawn once from the device seed.
    pub fn life_multiplier(&self, material: &MaterialConfig, seed: u64) -> f64 {
        let shape = self.cal.scatter_shape(material.filler);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        Weibull::new(1.0, shape)
            .expect("validated positive shape")
            .sample(&mut rng)
    }

    /// Amplitude factor reached at a given wear.
    pub fn amplitude_at_wear(&self, wear: f64) -> f64 {
        self.cal.wear_threshold.powf(wear.powf(self.cal.wear_shape))
    }

    fn breakdown_hazard(&self, wear: f64) -> f64 {
        (wear / self.cal.breakdown_wear).powf(self.cal.breakdown_shape)
    }

    /// Advances the device by `dt` seconds under `drive`.
    pub fn step_degradation(&self, spec: &DeviceSpec, state: &DeviceState, drive: &Drive, dt: f64) -> DeviceState {
        debug_assert!(dt > 0.0);
        let mut next = state.clone();
        next.age += dt;
        if state.failed || drive.field <= 0.0 {
            return next;
        }
        let eta = self.characteristic_life(&spec.material, drive) * self.life_multiplier(&spec.material, state.seed);
        let dw = dt / eta;
        let wear = state.wear + dw;
        next.wear = wear;
        next.amplitude_factor = self.amplitude_at_wear(wear).min(state.amplitude_factor);
        let c = &self.cal;
        let fade = c.capacitance_fade * (drive.field / c.life_field_ref).powf(c.capacitance_fade_field_exponent);
        next.capacitance_factor = state.capacitance_factor * (-fade * dw).exp();

        let d_hazard = self.breakdown_hazard(wear) - self.breakdown_hazard(state.wear);
        next.steps = state.steps + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(next.steps);
        let u: f64 = rng.random();
        if u < -(-d_hazard).exp_m1() {
            next.failed = true;
        }
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn model() -> DeviceModel {
        DeviceModel::default()
    }

    #[test]
    fn zero_field_gives_zero_output() {
        let m = model();
        let s = DeviceState::fresh(1);
        assert_eq!(m.displacement(&DeviceSpec::test_sample(), &s, 0.0), 0.0);
        assert_eq!(m.blocked_force(&DeviceSpec::scaled(), &s, 0.0), 0.0);
    }

    #[test]
    fn scaled_device_hits_two_millimetres() {
        let d = model().displacement(&DeviceSpec::scaled(), &DeviceState::fresh(0), 42.0);
        assert!((d - 2.0).abs() <= 0.1, "displacement {d}");
    }

    #[test]
    fn amplitude_factor_scales_linearly() {
        let m = model();
        let spec = DeviceSpec::scaled();
        let fresh = DeviceState::fresh(0);
        let half = DeviceState {
            amplitude_factor: 0.5,
            ..fresh.clone()
        };
        assert_eq!(m.displacement(&spec, &half, 42.0), m.displacement(&spec, &fresh, 42.0) * 0.5);
    }

    #[test]
    fn specific_force_anchor() {
        let m = model();
        let spec = DeviceSpec::scaled();
        let f = m.blocked_force(&spec, &DeviceState::fresh(0), m.calibration().rated_field);
        // 0.55 N/g x (28 g / 12 actuators)
        let expected = 0.55 * 28.0 / 12.0;
        assert!((f - expected).abs() <= 0.05 * expected, "force {f}");
        assert!((f - 1.28).abs() <= 0.05 * 1.28);
        let unreinforced = DeviceSpec {
            reinforced: false,
            ..spec
        };
        let g = m.blocked_force(&unreinforced, &DeviceState::fresh(0), m.calibration().rated_field);
        assert_eq!(2.0 * g, f);
    }

    #[test]
    fn small_sample_moves_less_at_35() {
        let m = model();
        let s = DeviceState::fresh(0);
        let small = m.displacement(&DeviceSpec::test_sample(), &s, 35.0);
        let big = m.displacement(&DeviceSpec::test_sample(), &s, 45.0);
        assert!(small > 0.0 && small < 0.5 * big);
    }

    #[test]
    fn failed_state_is_absorbing() {
        let m = model();
        let spec = DeviceSpec::test_sample();
        let dead = DeviceState {
            failed: true,
            wear: 0.3,
            amplitude_factor: 0.9,
            ..DeviceState::fresh(9)
        };
        let next = m.step_degradation(&spec, &dead, &Drive::new(50.0, 1.0), 2.0);
        assert_eq!(next.age, dead.age + 2.0);
        assert_eq!(DeviceState { age: dead.age, ..next }, dead);
        assert_eq!(m.displacement(&spec, &dead, 40.0), 0.0);
    }

    #[test]
    fn capacitance_range_and_rolloff() {
        let m = model();
        let spec = DeviceSpec::test_sample();
        let s = DeviceState::fresh(0);
        assert_eq!(m.capacitance(&spec, &s, 999.0), Err(DeviceError::ProbeRange(999.0)));
        assert!(m.capacitance(&spec, &s, 2.0e6).is_err());
        let lo = m.capacitance(&spec, &s, 1e3).unwrap();
        let hi = m.capacitance(&spec, &s, 1e6).unwrap();
        assert!(lo >= hi);
    }

    #[test]
    fn capacitance_doubles_with_layers() {
        // eps0 * eps_r * N * W * L / t, evaluated by hand for the scan sample:
        // 8.8541878128e-12 * 2.8 * 10 * (40e-3 * 10e-3) / 30e-6 = 3.30556e-9 F
        let m = model();
        let spec = DeviceSpec::test_sample();
        assert_relative_eq!(m.baseline_capacitance(&spec), 3.305_563, max_relative = 1e-6);
        let doubled = DeviceSpec {
            active_layers: 20,
            ..spec.clone()
        };
        assert_relative_eq!(
            m.baseline_capacitance(&doubled),
            2.0 * m.baseline_capacitance(&spec),
            max_relative = 1e-12
        );
    }

    #[test]
    fn aged_capacitance_is_smaller() {
        let m = model();
        let spec = DeviceSpec::test_sample();
        let mut s = DeviceState::fresh(3);
        let drive = Drive::new(50.0, 1.0);
        for _ in 0..200 {
            s = m.step_degradation(&spec, &s, &drive, 1.0);
        }
        let fresh = m.capacitance(&spec, &DeviceState::fresh(3), 1e4).unwrap();
        let aged = m.capacitance(&spec, &s, 1e4).unwrap();
        assert!(aged < fresh);
    }

    #[test]
    fn filler_parses_case_insensitively() {
        assert_eq!("cg".parse::<Filler>().unwrap(), Filler::CG);
        assert!("xx".parse::<Filler>().is_err());
        assert!(MaterialConfig::new(Filler::CB, 0.5).is_err());
        assert!(MaterialConfig::new(Filler::CB, 3.3).is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(DeviceSpec::test_sample().validate().is_ok());
        let bad = DeviceSpec {
            active_layers: 0,
            ..DeviceSpec::test_sample()
        };
        assert!(bad.validate().is_err());
        let bad = DeviceSpec {
            mass: 0.0,
            ..DeviceSpec::test_sample()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn voltage_conversion() {
        assert_eq!(DeviceSpec::test_sample().voltage_for(40.0), 1200.0);
    }
}
