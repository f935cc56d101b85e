use serde::{Deserialize, Serialize};

use super::adapter::{AdapterError, DriveCommand, HardwareAdapter, RotaryPos};
use crate::devicemodel::{DeviceModel, DeviceSpec, DeviceState, Drive};
use crate::landscape::DEFAULT_TICK;
use crate::waveform::WaveformSpec;

/// Timing and sensor constants of the simulated instruments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// s per rotary switch
    pub rotary_seconds: f64,
    /// mm/s
    pub linear_speed: f64,
    /// mm
    pub travel_max: f64,
    /// Stage position where the sensor touches the device, mm.
    pub contact_mm: f64,
    /// N/mm beyond contact
    pub contact_stiffness: f64,
    /// N
    pub force_full_scale: f64,
    /// GΩ
    pub leakage_resistance: f64,
    /// µA drawn through a broken-down device
    pub short_circuit_ua: f64,
    /// Degradation step, s of driven time.
    pub degradation_tick: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rotary_seconds: 2.0,
            linear_speed: 10.0,
            travel_max: 20.0,
            contact_mm: 8.0,
            contact_stiffness: 0.8,
            force_full_scale: 5.0,
            leakage_resistance: 1.0,
            short_circuit_ua: 4000.0,
            degradation_tick: DEFAULT_TICK,
        }
    }
}

/// Injectable instrument faults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimFaults {
    pub rotary_stall: bool,
    pub linear_stall: bool,
    pub force_dropout: bool,
}

/// Device-model-backed instruments for one channel.
#[derive(Debug, Clone)]
pub struct SimBackend {
    model: DeviceModel,
    spec: DeviceSpec,
    state: DeviceState,
    cfg: SimConfig,
    pub faults: SimFaults,
    drive: Option<WaveformSpec>,
    wave_t: f64,
    driven: f64,
    next_tick: f64,
    tau: f64,
    isolated: bool,
    rotary: RotaryPos,
    linear: f64,
}

impl SimBackend {
    pub fn new(model: DeviceModel, spec: DeviceSpec, seed: u64) -> Self {
        Self::with_config(model, spec, seed, SimConfig::default())
    }

    pub fn with_config(model: DeviceModel, spec: DeviceSpec, seed: u64, cfg: SimConfig) -> Self {
        let tau = model.time_constant(&spec);
        Self {
            model,
            spec,
            state: DeviceState::fresh(seed),
            next_tick: cfg.degradation_tick,
            cfg,
            faults: SimFaults::default(),
            drive: None,
            wave_t: 0.0,
            driven: 0.0,
            tau,
            isolated: false,
            rotary: RotaryPos::UnderLDS,
            linear: 0.0,
        }
    }

    /// Replaces the device under test. Stage and isolation are unchanged.
    pub fn mount(&mut self, spec: DeviceSpec, seed: u64) {
        self.tau = self.model.time_constant(&spec);
        self.spec = spec;
        self.state = DeviceState::fresh(seed);
        self.drive = None;
        self.wave_t = 0.0;
        self.driven = 0.0;
        self.next_tick = self.cfg.degradation_tick;
    }

    pub fn spec(&self) -> &DeviceSpec {
        &self.spec
    }

    pub fn state(&self) -> &DeviceState {
        &self.state
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Total time the device has been driven, s.
    pub fn driven_time(&self) -> f64 {
        self.driven
    }

    fn instant_field(&self) -> f64 {
        match &self.drive {
            Some(w) => {
                let t = self.wave_t.clamp(0.0, w.duration);
                w.field * w.charge_fraction(t, self.tau).unwrap_or(0.0)
            }
            None => 0.0,
        }
    }

    fn preload(&self) -> f64 {
        self.cfg.contact_stiffness * (self.linear - self.cfg.contact_mm).max(0.0)
    }
}

impl HardwareAdapter for SimBackend {
    fn set_voltage(&mut self, cmd: DriveCommand) -> Result<(), AdapterError> {
        match cmd {
            DriveCommand::Zero => self.drive = None,
            DriveCommand::Waveform { spec, t0 } => {
                if self.isolated {
                    return Err(AdapterError::Interlock("supply disconnected by isolation relay".into()));
                }
                spec.validate().map_err(|e| AdapterError::Instrument(e.to_string()))?;
                self.drive = Some(spec);
                self.wave_t = t0;
            }
        }
        Ok(())
    }

    fn read_voltage(&mut self) -> Result<f64, AdapterError> {
        Ok(match &self.drive {
            Some(w) => w.high_voltage(self.spec.layer_thickness) * if w.is_high(self.wave_t.clamp(0.0, w.duration)).unwrap_or(false) { 1.0 } else { 0.0 },
            None => 0.0,
        })
    }

    fn read_current(&mut self) -> Result<f64, AdapterError> {
        let Some(w) = &self.drive else { return Ok(0.0) };
        if self.state.failed {
            return Ok(self.cfg.short_circuit_ua);
        }
        let v = w.high_voltage(self.spec.layer_thickness);
        // V / GΩ = nA
        Ok(v / self.cfg.leakage_resistance * 1e-3)
    }

    fn read_displacement(&mut self) -> Result<f64, AdapterError> {
        if self.rotary != RotaryPos::UnderLDS {
            return Err(AdapterError::Unavailable("device not under LDS".into()));
        }
        Ok(self.model.displacement(&self.spec, &self.state, self.instant_field()))
    }

    fn read_force(&mut self) -> Result<Option<f64>, AdapterError> {
        if self.faults.force_dropout {
            return Ok(None);
        }
        if self.rotary != RotaryPos::UnderForceSensor {
            return Ok(Some(0.0));
        }
        let mut f = self.preload();
        if self.linear > self.cfg.contact_mm {
            f += self.model.blocked_force(&self.spec, &self.state, self.instant_field());
        }
        Ok(Some(f.min(self.cfg.force_full_scale)))
    }

    fn move_rotary(&mut self, to: RotaryPos) -> Result<f64, AdapterError> {
        if to == self.rotary {
            return Ok(0.0);
        }
        if self.faults.rotary_stall {
            return Err(AdapterError::Timeout("rotary stage stalled".into()));
        }
        self.rotary = to;
        Ok(self.cfg.rotary_seconds)
    }

    fn move_linear(&mut self, to: f64) -> Result<f64, AdapterError> {
        if !(0.0..=self.cfg.travel_max + 1e-9).contains(&to) {
            return Err(AdapterError::OutOfRange(format!("linear target {to} mm")));
        }
        if self.faults.linear_stall {
            return Err(AdapterError::Timeout("linear stage stalled".into()));
        }
        let dt = (to - self.linear).abs() / self.cfg.linear_speed;
        self.linear = to.min(self.cfg.travel_max);
        Ok(dt)
    }

    fn set_isolation(&mut self, isolated: bool) -> Result<(), AdapterError> {
        if isolated && self.drive.is_some() {
            return Err(AdapterError::Interlock("cannot isolate with drive applied".into()));
        }
        self.isolated = isolated;
        Ok(())
    }

    fn impedance_point(&mut self, probe_freq: f64) -> Result<f64, AdapterError> {
        if !self.isolated {
            return Err(AdapterError::Interlock("LCR meter not connected".into()));
        }
        self.model
            .capacitance(&self.spec, &self.state, probe_freq)
            .map_err(|e| AdapterError::Instrument(e.to_string()))
    }

    fn advance(&mut self, dt: f64) {
        let Some(w) = &self.drive else { return };
        let w = w.clone();
        self.wave_t += dt;
        self.driven += dt;
        let tick = self.cfg.degradation_tick;
        while self.next_tick <= self.driven + 1e-9 {
            let drive = Drive {
                field: w.field,
                frequency: w.frequency_at(self.wave_t.clamp(0.0, w.duration)),
            };
            self.state = self.model.step_degradation(&self.spec, &self.state, &drive, tick);
            self.next_tick += tick;
        }
    }

    fn travel_max(&self) -> f64 {
        self.cfg.travel_max
    }
}
