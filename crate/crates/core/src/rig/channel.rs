use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adapter::{AdapterError, DriveCommand, HardwareAdapter, RotaryPos};
use super::telemetry::{NullSink, SinkError, TelemetrySample, TelemetrySink};
use crate::analysis::SweepPoint;
use crate::devicemodel::{PROBE_MAX_HZ, PROBE_MIN_HZ};
use crate::waveform::WaveformSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Idle,
    ActuatingDisplacement,
    SwitchingStage,
    ClampingForce,
    MeasuringForce,
    ImpedanceSweep,
    Faulted,
}

impl ChannelMode {
    /// Whether the state diagram allows `self -> to`.
    pub fn can_transition(self, to: ChannelMode) -> bool {
        use ChannelMode::*;
        match (self, to) {
            (_, Faulted) => true,
            (Faulted, Idle) => true,
            (Idle | ActuatingDisplacement | MeasuringForce | ImpedanceSweep, SwitchingStage) => true,
            (SwitchingStage, Idle | ActuatingDisplacement | ClampingForce | ImpedanceSweep) => true,
            (ClampingForce, MeasuringForce) => true,
            _ => false,
        }
    }
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned));
        f.write_str(s.as_deref().unwrap_or("?"))
    }
}

/// Operator-selectable destination of [`ChannelRig::switch_mode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeTarget {
    Idle,
    Displacement,
    Force,
    Impedance,
}

impl ModeTarget {
    pub fn mode(self) -> ChannelMode {
        match self {
            ModeTarget::Idle => ChannelMode::Idle,
            ModeTarget::Displacement => ChannelMode::ActuatingDisplacement,
            ModeTarget::Force => ChannelMode::MeasuringForce,
            ModeTarget::Impedance => ChannelMode::ImpedanceSweep,
        }
    }
}

impl FromStr for ModeTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "idle" => Ok(ModeTarget::Idle),
            "displacement" => Ok(ModeTarget::Displacement),
            "force" => Ok(ModeTarget::Force),
            "impedance" => Ok(ModeTarget::Impedance),
            other => Err(format!("unknown mode target {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionStage {
    pub rotary_pos: RotaryPos,
    /// mm
    pub linear_pos: f64,
    /// N
    pub clamp_force: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Interlock {
    pub hv_isolated: bool,
    pub hv_live: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum FaultReason {
    Overtravel,
    Sensor,
    MotorTimeout(String),
    Storage(String),
    Adapter(String),
}

impl fmt::Display for FaultReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultReason::Overtravel => f.write_str("overtravel"),
            FaultReason::Sensor => f.write_str("sensor"),
            FaultReason::MotorTimeout(m) => write!(f, "motor timeout: {m}"),
            FaultReason::Storage(m) => write!(f, "storage: {m}"),
            FaultReason::Adapter(m) => write!(f, "adapter: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EventKind {
    ModeChanged { from: ChannelMode, to: ChannelMode },
    HvZeroed,
    HvIsolated,
    HvReconnected,
    DriveApplied { field: f64 },
    ClampReleased,
    RotaryMoved { to: RotaryPos },
    ClampConverged { force: f64, linear_pos: f64 },
    InterlockViolation { attempted: String },
    Faulted { reason: FaultReason },
    FaultReset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigEvent {
    /// Channel clock, s.
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RigError {
    #[error("interlock: {0}")]
    Interlock(String),
    #[error("channel faulted ({0}); reset required")]
    Faulted(FaultReason),
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: ChannelMode, to: ChannelMode },
    #[error("channel busy in mode {0}")]
    Busy(ChannelMode),
    #[error("invalid request: {0}")]
    Invalid(String),
}

impl RigError {
    /// Short machine-readable reason.
    pub fn reason(&self) -> &'static str {
        match self {
            RigError::Interlock(_) => "interlock",
            RigError::Faulted(_) => "faulted",
            RigError::IllegalTransition { .. } => "illegal-transition",
            RigError::Busy(_) => "busy",
            RigError::Invalid(_) => "invalid",
        }
    }
}

/// Controller constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    /// Longest acceptable single motor move, s.
    pub motor_timeout: f64,
    /// mm per clamp step
    pub clamp_step: f64,
    /// N above the bias still accepted as converged
    pub clamp_tolerance: f64,
    /// Preload used when switching to force mode, N.
    pub bias_force: f64,
    /// s per impedance point
    pub impedance_point_time: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            motor_timeout: 10.0,
            clamp_step: 0.05,
            clamp_tolerance: 0.05,
            bias_force: 0.6,
            impedance_point_time: 0.02,
        }
    }
}

/// Result of a converged clamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampResult {
    pub clamp_force: f64,
    pub linear_pos: f64,
    pub steps: u32,
}

/// Log-spaced probe frequencies across the sweep range.
pub fn sweep_frequencies(points: usize) -> Vec<f64> {
    let n = points.max(2);
    let ratio = PROBE_MAX_HZ / PROBE_MIN_HZ;
    (0..n)
        .map(|i| (PROBE_MIN_HZ * ratio.powf(i as f64 / (n - 1) as f64)).clamp(PROBE_MIN_HZ, PROBE_MAX_HZ))
        .collect()
}

/// One measurement channel: mode state machine, motion stage and interlocks
/// over a hardware adapter.
pub struct ChannelRig<A: HardwareAdapter> {
    id: u32,
    adapter: A,
    cfg: RigConfig,
    mode: ChannelMode,
    stage: MotionStage,
    interlock: Interlock,
    fault: Option<FaultReason>,
    clock: f64,
    epoch: f64,
    events: Vec<RigEvent>,
    sink: Box<dyn TelemetrySink>,
}

impl<A: HardwareAdapter> ChannelRig<A> {
    pub fn new(id: u32, adapter: A) -> Self {
        Self::with_config(id, adapter, RigConfig::default())
    }

    pub fn with_config(id: u32, adapter: A, cfg: RigConfig) -> Self {
        Self {
            id,
            adapter,
            cfg,
            mode: ChannelMode::Idle,
            stage: MotionStage {
                rotary_pos: RotaryPos::UnderLDS,
                linear_pos: 0.0,
                clamp_force: 0.0,
            },
            interlock: Interlock::default(),
            fault: None,
            clock: 0.0,
            epoch: 0.0,
            events: Vec::new(),
            sink: Box::new(NullSink),
        }
    }

    pub fn set_sink(&mut self, sink: Box<dyn TelemetrySink>) {
        self.sink = sink;
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn mode(&self) -> ChannelMode {
        self.mode
    }

    pub fn stage(&self) -> MotionStage {
        self.stage
    }

    pub fn interlock(&self) -> Interlock {
        self.interlock
    }

    pub fn fault(&self) -> Option<&FaultReason> {
        self.fault.as_ref()
    }

    pub fn config(&self) -> &RigConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut RigConfig {
        &mut self.cfg
    }

    /// Channel clock, s.
    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn events(&self) -> &[RigEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<RigEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn adapter(&self) -> &A {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut A {
        &mut self.adapter
    }

    pub(super) fn start_epoch(&mut self) {
        self.epoch = self.clock;
    }

    pub(super) fn elapse(&mut self, dt: f64) {
        if dt > 0.0 {
            self.clock += dt;
            self.adapter.advance(dt);
        }
    }

    fn log(&mut self, kind: EventKind) {
        self.events.push(RigEvent { t: self.clock, kind });
    }

    fn transition(&mut self, to: ChannelMode) -> Result<(), RigError> {
        if !self.mode.can_transition(to) {
            return Err(RigError::IllegalTransition { from: self.mode, to });
        }
        if to == ChannelMode::ImpedanceSweep && !self.interlock.hv_isolated {
            return Err(RigError::Interlock("impedance mode requires HV isolation".into()));
        }
        let from = self.mode;
        self.mode = to;
        self.log(EventKind::ModeChanged { from, to });
        Ok(())
    }

    /// Moves to Faulted and returns the matching error.
    pub(super) fn enter_fault(&mut self, reason: FaultReason) -> RigError {
        let _ = self.adapter.set_voltage(DriveCommand::Zero);
        self.interlock.hv_live = false;
        if self.mode != ChannelMode::Faulted {
            let from = self.mode;
            self.mode = ChannelMode::Faulted;
            self.log(EventKind::ModeChanged {
                from,
                to: ChannelMode::Faulted,
            });
            self.log(EventKind::Faulted { reason: reason.clone() });
        }
        self.fault = Some(reason.clone());
        RigError::Faulted(reason)
    }

    fn adapter_fault(&mut self, e: AdapterError) -> RigError {
        match e {
            AdapterError::Timeout(m) => self.enter_fault(FaultReason::MotorTimeout(m)),
            other => self.enter_fault(FaultReason::Adapter(other.to_string())),
        }
    }

    fn ensure_not_faulted(&self) -> Result<(), RigError> {
        match &self.fault {
            Some(r) => Err(RigError::Faulted(r.clone())),
            None => Ok(()),
        }
    }

    fn timed_move(&mut self, dt: Result<f64, AdapterError>) -> Result<(), RigError> {
        match dt {
            Ok(dt) if dt > self.cfg.motor_timeout => {
                self.elapse(self.cfg.motor_timeout);
                Err(self.enter_fault(FaultReason::MotorTimeout(format!("move needs {dt:.2} s"))))
            }
            Ok(dt) => {
                self.elapse(dt);
                Ok(())
            }
            Err(e) => {
                if matches!(e, AdapterError::Timeout(_)) {
                    self.elapse(self.cfg.motor_timeout);
                }
                Err(self.adapter_fault(e))
            }
        }
    }

    pub(super) fn emit_with(
        &mut self,
        voltage: f64,
        current: f64,
        displacement: Option<f64>,
        force: Option<f64>,
    ) -> Result<(), RigError> {
        let sample = TelemetrySample {
            t: self.clock - self.epoch,
            channel: self.id,
            mode: self.mode,
            voltage,
            current,
            displacement: if self.mode == ChannelMode::ActuatingDisplacement { displacement } else { None },
            force: if self.mode == ChannelMode::MeasuringForce { force } else { None },
            clamp_force: self.stage.clamp_force,
            hv_isolated: self.interlock.hv_isolated,
        };
        self.sink
            .record(&sample)
            .map_err(|SinkError(m)| self.enter_fault(FaultReason::Storage(m)))
    }

    pub(super) fn flush_sink(&mut self) -> Result<(), RigError> {
        self.sink
            .flush()
            .map_err(|SinkError(m)| self.enter_fault(FaultReason::Storage(m)))
    }

    pub(super) fn zero_hv(&mut self) -> Result<(), RigError> {
        self.adapter.set_voltage(DriveCommand::Zero).map_err(|e| self.adapter_fault(e))?;
        self.interlock.hv_live = false;
        self.log(EventKind::HvZeroed);
        Ok(())
    }

    /// Starts playing a waveform from waveform time `t0`. Allowed only while
    /// actuating or measuring force.
    pub fn apply_drive(&mut self, wave: &WaveformSpec, t0: f64) -> Result<(), RigError> {
        self.ensure_not_faulted()?;
        if !matches!(self.mode, ChannelMode::ActuatingDisplacement | ChannelMode::MeasuringForce) {
            return Err(RigError::Busy(self.mode));
        }
        if self.interlock.hv_isolated {
            self.log(EventKind::InterlockViolation {
                attempted: "drive while isolated".into(),
            });
            return Err(RigError::Interlock("HV is isolated".into()));
        }
        self.adapter
            .set_voltage(DriveCommand::Waveform { spec: wave.clone(), t0 })
            .map_err(|e| self.adapter_fault(e))?;
        self.interlock.hv_live = wave.field > 0.0;
        self.log(EventKind::DriveApplied { field: wave.field });
        Ok(())
    }

    /// Zeroes the drive without changing mode.
    pub fn stop_drive(&mut self) -> Result<(), RigError> {
        self.ensure_not_faulted()?;
        if self.interlock.hv_live {
            self.zero_hv()?;
        }
        Ok(())
    }

    fn release_clamp(&mut self) -> Result<(), RigError> {
        if self.stage.linear_pos > 0.0 || self.stage.clamp_force > 0.0 {
            let dt = self.adapter.move_linear(0.0);
            self.timed_move(dt)?;
            self.stage.linear_pos = 0.0;
            self.stage.clamp_force = 0.0;
            self.log(EventKind::ClampReleased);
        }
        Ok(())
    }

    fn rotate(&mut self, to: RotaryPos) -> Result<(), RigError> {
        if self.stage.rotary_pos != to {
            let dt = self.adapter.move_rotary(to);
            self.timed_move(dt)?;
            self.stage.rotary_pos = to;
            self.log(EventKind::RotaryMoved { to });
        }
        Ok(())
    }

    fn set_isolation(&mut self, isolated: bool) -> Result<(), RigError> {
        if self.interlock.hv_isolated == isolated {
            return Ok(());
        }
        self.adapter.set_isolation(isolated).map_err(|e| self.adapter_fault(e))?;
        self.interlock.hv_isolated = isolated;
        self.log(if isolated { EventKind::HvIsolated } else { EventKind::HvReconnected });
        Ok(())
    }

    /// Runs the ordered switch sequence to `target`.
    ///
    /// Impedance is refused while HV is live; the drive must be stopped first.
    pub fn switch_mode(&mut self, target: ModeTarget) -> Result<(), RigError> {
        self.ensure_not_faulted()?;
        if target == ModeTarget::Impedance && self.interlock.hv_live {
            self.log(EventKind::InterlockViolation {
                attempted: "impedance with HV live".into(),
            });
            return Err(RigError::Interlock("HV live; stop the drive before impedance".into()));
        }
        if self.mode == target.mode() {
            return Ok(());
        }
        if !self.mode.can_transition(ChannelMode::SwitchingStage) {
            return Err(RigError::Busy(self.mode));
        }
        self.transition(ChannelMode::SwitchingStage)?;
        self.zero_hv()?;
        self.release_clamp()?;
        match target {
            ModeTarget::Impedance => self.set_isolation(true)?,
            _ => self.set_isolation(false)?,
        }
        match target {
            ModeTarget::Idle | ModeTarget::Impedance => {}
            ModeTarget::Displacement => self.rotate(RotaryPos::UnderLDS)?,
            ModeTarget::Force => {
                self.rotate(RotaryPos::UnderForceSensor)?;
                self.transition(ChannelMode::ClampingForce)?;
                let bias = self.cfg.bias_force;
                self.clamp_with_feedback(bias)?;
            }
        }
        self.transition(target.mode())?;
        self.sample().map(|_| ())
    }

    /// Steps the linear stage down until the force reading reaches `bias`.
    pub fn clamp_with_feedback(&mut self, bias: f64) -> Result<ClampResult, RigError> {
        self.ensure_not_faulted()?;
        if self.stage.rotary_pos != RotaryPos::UnderForceSensor {
            return Err(RigError::Invalid("clamp requires the force sensor position".into()));
        }
        if !(bias > 0.0) {
            return Err(RigError::Invalid(format!("bias {bias} N")));
        }
        let step = self.cfg.clamp_step;
        let tol = self.cfg.clamp_tolerance;
        let travel_max = self.adapter.travel_max();
        let mut steps = 0u32;
        loop {
            let force = match self.adapter.read_force() {
                Ok(Some(f)) => f,
                Ok(None) => return Err(self.enter_fault(FaultReason::Sensor)),
                Err(e) => return Err(self.adapter_fault(e)),
            };
            let pos = self.stage.linear_pos;
            let target = if force > bias + tol {
                (pos - step).max(0.0)
            } else if force >= bias {
                self.stage.clamp_force = force;
                self.log(EventKind::ClampConverged { force, linear_pos: pos });
                return Ok(ClampResult {
                    clamp_force: force,
                    linear_pos: pos,
                    steps,
                });
            } else {
                if pos + step > travel_max + 1e-9 {
                    return Err(self.enter_fault(FaultReason::Overtravel));
                }
                pos + step
            };
            let dt = self.adapter.move_linear(target);
            self.timed_move(dt)?;
            self.stage.linear_pos = target;
            steps += 1;
        }
    }

    /// Sweeps capacitance across the probe range. Requires isolation.
    pub fn impedance_sweep(&mut self, points: usize) -> Result<Vec<SweepPoint>, RigError> {
        self.ensure_not_faulted()?;
        if !self.interlock.hv_isolated || self.interlock.hv_live {
            self.log(EventKind::InterlockViolation {
                attempted: "impedance sweep without isolation".into(),
            });
            return Err(RigError::Interlock("HV not isolated".into()));
        }
        if self.mode != ChannelMode::ImpedanceSweep {
            return Err(RigError::Busy(self.mode));
        }
        let mut out = Vec::with_capacity(points);
        for f in sweep_frequencies(points) {
            let c = self.adapter.impedance_point(f).map_err(|e| self.adapter_fault(e))?;
            self.elapse(self.cfg.impedance_point_time);
            self.emit_with(0.0, 0.0, None, None)?;
            out.push(SweepPoint {
                probe_freq: f,
                capacitance: c,
            });
        }
        Ok(out)
    }

    /// Clears a fault: drive off, clamp released, back to Idle.
    pub fn reset_fault(&mut self) -> Result<(), RigError> {
        if self.mode != ChannelMode::Faulted {
            return Err(RigError::Invalid("channel is not faulted".into()));
        }
        let _ = self.adapter.set_voltage(DriveCommand::Zero);
        self.interlock.hv_live = false;
        self.fault = None;
        self.log(EventKind::FaultReset);
        self.transition(ChannelMode::Idle)?;
        if let Ok(dt) = self.adapter.move_linear(0.0) {
            self.elapse(dt);
            self.stage.linear_pos = 0.0;
            self.stage.clamp_force = 0.0;
        }
        Ok(())
    }

    /// Reads the instruments appropriate to the current mode and emits one
    /// telemetry record.
    pub fn sample(&mut self) -> Result<TelemetrySample, RigError> {
        self.ensure_not_faulted()?;
        let voltage = self.adapter.read_voltage().map_err(|e| self.adapter_fault(e))?;
        let current = self.adapter.read_current().map_err(|e| self.adapter_fault(e))?;
        let displacement = if self.mode == ChannelMode::ActuatingDisplacement {
            Some(self.adapter.read_displacement().map_err(|e| self.adapter_fault(e))?)
        } else {
            None
        };
        let force = if self.mode == ChannelMode::MeasuringForce {
            match self.adapter.read_force().map_err(|e| self.adapter_fault(e))? {
                Some(f) => Some((f - self.stage.clamp_force).max(0.0)),
                None => return Err(self.enter_fault(FaultReason::Sensor)),
            }
        } else {
            None
        };
        self.emit_with(voltage, current, displacement, force)?;
        Ok(TelemetrySample {
            t: self.clock - self.epoch,
            channel: self.id,
            mode: self.mode,
            voltage,
            current,
            displacement,
            force,
            clamp_force: self.stage.clamp_force,
            hv_isolated: self.interlock.hv_isolated,
        })
    }

    /// Lets `dt` seconds pass on the channel clock.
    pub fn wait(&mut self, dt: f64) {
        self.elapse(dt.max(0.0));
    }
}
