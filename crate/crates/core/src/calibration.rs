//! Versioned calibration constants for the synthetic actuator.
//!
//! The shipped values live in `calibration/default.cal`, a flat `key = value`
//! file. Campaigns may override any subset of keys.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devicemodel::Filler;

const DEFAULT_CALIBRATION: &str = include_str!("../calibration/default.cal");

/// Highest calibration format version this build understands.
pub const CALIBRATION_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("calibration io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported calibration version {0} (expected {CALIBRATION_VERSION})")]
    Version(u32),
    #[error("override for `{key}` has unsupported value {value}")]
    OverrideValue { key: String, value: String },
    #[error("invalid calibration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub version: u32,

    pub relative_permittivity: f64,
    pub probe_rolloff_per_decade: f64,

    pub anchor_strain: f64,
    pub anchor_field: f64,
    pub saturation_field: f64,
    pub saturation_width: f64,

    pub anchor_specific_force: f64,
    pub anchor_mass: f64,
    pub anchor_layers: u32,
    pub anchor_layer_thickness: f64,
    pub anchor_electrode_width: f64,
    pub rated_field: f64,
    pub anchor_filler: Filler,
    pub anchor_cnt: f64,

    pub gain_cb: f64,
    pub gain_cg: f64,
    pub gain_lm: f64,
    pub cnt_gain_peak: f64,
    pub cnt_gain_width: f64,

    pub resistance_filler_cb: f64,
    pub resistance_filler_cg: f64,
    pub resistance_filler_lm: f64,
    pub resistance_electrode_ref: f64,
    pub resistance_electrode_exponent: f64,
    pub cnt_ref: f64,

    pub life_ref: f64,
    pub life_field_ref: f64,
    pub life_field_exponent: f64,
    pub life_freq_exponent: f64,
    pub blend_freq_low: f64,
    pub blend_freq_high: f64,
    pub life_cb_low: f64,
    pub life_cb_high: f64,
    pub life_cg_low: f64,
    pub life_cg_high: f64,
    pub life_lm_low: f64,
    pub life_lm_high: f64,
    pub cnt_life_peak: f64,
    pub cnt_life_width: f64,

    pub scatter_shape_cb: f64,
    pub scatter_shape_cg: f64,
    pub scatter_shape_lm: f64,

    pub wear_threshold: f64,
    pub wear_shape: f64,
    pub breakdown_wear: f64,
    pub breakdown_shape: f64,
    pub capacitance_fade: f64,
    pub capacitance_fade_field_exponent: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self::parse(DEFAULT_CALIBRATION).expect("shipped calibration parses")
    }
}

impl Calibration {
    /// Text of the shipped calibration file.
    pub fn shipped_text() -> &'static str {
        DEFAULT_CALIBRATION
    }

    /// Parses a calibration file. Keys absent from `text` keep their shipped
    /// values.
    pub fn parse(text: &str) -> Result<Self, CalibrationError> {
        let mut table: toml::Table = DEFAULT_CALIBRATION.parse()?;
        let overrides: toml::Table = text.parse()?;
        table.extend(overrides);
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies per-campaign overrides given as a JSON object of key to number
    /// or string.
    pub fn with_overrides(
        &self,
        overrides: &BTreeMap<String, serde_json::Value>,
    ) -> Result<Self, CalibrationError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table = toml::Table::try_from(self).map_err(|e| {
            CalibrationError::Invalid(format!("cannot re-encode calibration: {e}"))
        })?;
        for (key, value) in overrides {
            let v = match value {
                serde_json::Value::Number(n) if n.is_u64() && table.get(key).is_some_and(|t| t.is_integer()) => {
                    toml::Value::Integer(n.as_u64().unwrap_or_default() as i64)
                }
                serde_json::Value::Number(n) => match n.as_f64() {
                    Some(x) => toml::Value::Float(x),
                    None => {
                        return Err(CalibrationError::OverrideValue {
                            key: key.clone(),
                            value: value.to_string(),
                        })
                    }
                },
                serde_json::Value::String(s) => toml::Value::String(s.clone()),
                other => {
                    return Err(CalibrationError::OverrideValue {
                        key: key.clone(),
                        value: other.to_string(),
                    })
                }
            };
            table.insert(key.clone(), v);
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self, CalibrationError> {
        let cal: Calibration = table.try_into()?;
        if cal.version != CALIBRATION_VERSION {
            return Err(CalibrationError::Version(cal.version));
        }
        cal.validate()?;
        Ok(cal)
    }

    fn validate(&self) -> Result<(), CalibrationError> {
        let positive = [
            ("relative_permittivity", self.relative_permittivity),
            ("anchor_strain", self.anchor_strain),
            ("anchor_field", self.anchor_field),
            ("saturation_width", self.saturation_width),
            ("anchor_specific_force", self.anchor_specific_force),
            ("anchor_mass", self.anchor_mass),
            ("anchor_layer_thickness", self.anchor_layer_thickness),
            ("anchor_electrode_width", self.anchor_electrode_width),
            ("rated_field", self.rated_field),
            ("cnt_gain_width", self.cnt_gain_width),
            ("cnt_life_width", self.cnt_life_width),
            ("life_ref", self.life_ref),
            ("life_field_ref", self.life_field_ref),
            ("scatter_shape_cb", self.scatter_shape_cb),
            ("scatter_shape_cg", self.scatter_shape_cg),
            ("scatter_shape_lm", self.scatter_shape_lm),
            ("wear_shape", self.wear_shape),
            ("breakdown_wear", self.breakdown_wear),
            ("breakdown_shape", self.breakdown_shape),
            ("cnt_ref", self.cnt_ref),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CalibrationError::Invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.anchor_layers == 0 {
            return Err(CalibrationError::Invalid("anchor_layers must be >= 1".into()));
        }
        if !(self.wear_threshold > 0.0 && self.wear_threshold < 1.0) {
            return Err(CalibrationError::Invalid("wear_threshold must lie in (0, 1)".into()));
        }
        if !(self.blend_freq_high > self.blend_freq_low && self.blend_freq_low > 0.0) {
            return Err(CalibrationError::Invalid("blend frequencies must satisfy 0 < low < high".into()));
        }
        Ok(())
    }

    pub fn filler_gain(&self, filler: Filler) -> f64 {
        match filler {
            Filler::CB => self.gain_cb,
            Filler::CG => self.gain_cg,
            Filler::LM => self.gain_lm,
        }
    }

    pub fn filler_resistance(&self, filler: Filler) -> f64 {
        match filler {
            Filler::CB => self.resistance_filler_cb,
            Filler::CG => self.resistance_filler_cg,
            Filler::LM => self.resistance_filler_lm,
        }
    }

    /// (low-frequency, high-frequency) life factors for a filler.
    pub fn filler_life(&self, filler: Filler) -> (f64, f64) {
        match filler {
            Filler::CB => (self.life_cb_low, self.life_cb_high),
            Filler::CG => (self.life_cg_low, self.life_cg_high),
            Filler::LM => (self.life_lm_low, self.life_lm_high),
        }
    }

    pub fn scatter_shape(&self, filler: Filler) -> f64 {
        match filler {
            Filler::CB => self.scatter_shape_cb,
            Filler::CG => self.scatter_shape_cg,
            Filler::LM => self.scatter_shape_lm,
        }
    }
}
