//! Command/response boundary between the channel controller and the
//! instruments. The shipped implementation is [`super::SimBackend`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::waveform::WaveformSpec;

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum AdapterError {
    #[error("motor timeout: {0}")]
    Timeout(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("instrument unavailable: {0}")]
    Unavailable(String),
    #[error("interlock: {0}")]
    Interlock(String),
    #[error("instrument error: {0}")]
    Instrument(String),
}

/// Rotary stage position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotaryPos {
    UnderLDS,
    UnderForceSensor,
}

/// High-voltage supply command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveCommand {
    Zero,
    /// Play `spec` starting at waveform time `t0`.
    Waveform { spec: WaveformSpec, t0: f64 },
}

pub trait HardwareAdapter: Send {
    fn set_voltage(&mut self, cmd: DriveCommand) -> Result<(), AdapterError>;
    /// Commanded supply output, V.
    fn read_voltage(&mut self) -> Result<f64, AdapterError>;
    /// µA
    fn read_current(&mut self) -> Result<f64, AdapterError>;
    /// LDS reading, mm.
    fn read_displacement(&mut self) -> Result<f64, AdapterError>;
    /// Force sensor reading, N; `None` when the sensor returns nothing.
    fn read_force(&mut self) -> Result<Option<f64>, AdapterError>;
    /// Returns the time the move took, s.
    fn move_rotary(&mut self, to: RotaryPos) -> Result<f64, AdapterError>;
    /// Moves the linear stage to an absolute position (mm, positive is
    /// down); returns the time taken, s.
    fn move_linear(&mut self, to: f64) -> Result<f64, AdapterError>;
    fn set_isolation(&mut self, isolated: bool) -> Result<(), AdapterError>;
    /// Capacitance at one probe frequency, nF.
    fn impedance_point(&mut self, probe_freq: f64) -> Result<f64, AdapterError>;
    /// Lets simulated time pass. Real hardware ignores this.
    fn advance(&mut self, _dt: f64) {}
    /// Linear stage travel limit, mm.
    fn travel_max(&self) -> f64;
}
