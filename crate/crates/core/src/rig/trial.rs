use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::adapter::HardwareAdapter;
use super::channel::{ChannelMode, ChannelRig, FaultReason, ModeTarget, RigError};
use crate::analysis::{
    average_displacement, capacitance_degradation, CycleTracker, LifetimeParams, LifetimeResult, LifetimeTracker,
    SweepPoint, TerminalCause,
};
use crate::waveform::WaveformSpec;

/// Measurement protocol of one lifetime trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    /// Displacement/current sampling rate, Hz. Raised to four samples per
    /// drive period when the drive is faster.
    pub sample_rate: f64,
    /// Rate of records written to telemetry, Hz.
    pub telemetry_rate: f64,
    pub lifetime: LifetimeParams,
    /// Interval between blocked-force checks, s of actuation.
    pub force_check_interval: Option<f64>,
    /// Clamp preload for force checks, N.
    pub bias_force: f64,
    pub sweep_points: usize,
    pub pre_sweep: bool,
    pub post_sweep: bool,
    /// End actuation once the lifetime threshold crossing is confirmed.
    pub stop_on_threshold: bool,
    /// Current above which the device is considered broken down, µA.
    pub current_trip_ua: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            sample_rate: 100.0,
            telemetry_rate: 10.0,
            lifetime: LifetimeParams::default(),
            force_check_interval: None,
            bias_force: 0.6,
            sweep_points: 50,
            pre_sweep: true,
            post_sweep: true,
            stop_on_threshold: true,
            current_trip_ua: 3000.0,
        }
    }
}

impl Protocol {
    /// Sampling rate actually used for `wave`.
    pub fn effective_rate(&self, wave: &WaveformSpec) -> f64 {
        self.sample_rate.max(4.0 * wave.freq_start.max(wave.freq_end))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrialStatus {
    Complete,
    Aborted,
    Faulted,
}

/// Operator abort flag shared with whoever issues commands.
#[derive(Debug, Clone, Default)]
pub struct AbortSignal(Arc<AtomicBool>);

impl AbortSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn request(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn clear(&self) {
        self.0.store(false, Ordering::SeqCst);
    }

    pub fn is_requested(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Everything a trial produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub status: TrialStatus,
    pub lifetime: LifetimeResult,
    /// mm, mean cycle amplitude up to the lifetime.
    pub avg_displacement: Option<f64>,
    /// Actuation time, s.
    pub duration: f64,
    pub hard_failure_t: Option<f64>,
    pub pre_sweep: Vec<SweepPoint>,
    pub post_sweep: Vec<SweepPoint>,
    pub capacitance_loss: Option<f64>,
    /// Largest actuator force seen during force checks, N.
    pub peak_force: Option<f64>,
    pub cycles: usize,
    pub fault: Option<FaultReason>,
}

struct Progress {
    pre: Vec<SweepPoint>,
    post: Vec<SweepPoint>,
    wave_t: f64,
    hard_failure_t: Option<f64>,
    aborted: bool,
    peak_force: Option<f64>,
}

impl<A: HardwareAdapter> ChannelRig<A> {
    /// Runs one lifetime trial: pre-sweep, actuation with displacement
    /// sampling (and optional force checks), post-sweep, back to Idle.
    ///
    /// Precondition failures return `Err`; faults during the trial return a
    /// `Faulted` outcome carrying the partial data.
    pub fn run_trial(
        &mut self,
        wave: &WaveformSpec,
        protocol: &Protocol,
        abort: &AbortSignal,
    ) -> Result<TrialOutcome, RigError> {
        if let Some(r) = self.fault() {
            return Err(RigError::Faulted(r.clone()));
        }
        if self.mode() != ChannelMode::Idle {
            return Err(RigError::Busy(self.mode()));
        }
        wave.validate().map_err(|e| RigError::Invalid(e.to_string()))?;
        protocol.lifetime.validate().map_err(|e| RigError::Invalid(e.to_string()))?;
        self.start_epoch();
        self.config_mut().bias_force = protocol.bias_force;

        let mut cycles = CycleTracker::new(wave.clone());
        let mut life = LifetimeTracker::new(protocol.lifetime.clone());
        let mut p = Progress {
            pre: Vec::new(),
            post: Vec::new(),
            wave_t: 0.0,
            hard_failure_t: None,
            aborted: false,
            peak_force: None,
        };
        let res = self.trial_body(wave, protocol, abort, &mut cycles, &mut life, &mut p);
        let _ = self.flush_sink();
        let status = match (&res, p.aborted) {
            (Err(_), _) => TrialStatus::Faulted,
            (Ok(()), true) => TrialStatus::Aborted,
            (Ok(()), false) => TrialStatus::Complete,
        };

        let lifetime = match status {
            TrialStatus::Complete => life.finish(p.hard_failure_t).ok(),
            _ => None,
        };
        let lifetime = lifetime.unwrap_or_else(|| LifetimeResult {
            lifetime: p.wave_t.min(protocol.lifetime.cap),
            censored: false,
            initial_amplitude: life.initial_amplitude().unwrap_or(0.0),
            terminal_cause: TerminalCause::Aborted,
        });
        let avg_displacement = average_displacement(life.cycles(), lifetime.lifetime).ok();
        let capacitance_loss = capacitance_degradation(&p.pre, &p.post).ok();
        Ok(TrialOutcome {
            status,
            avg_displacement,
            duration: p.wave_t,
            hard_failure_t: p.hard_failure_t,
            capacitance_loss,
            peak_force: p.peak_force,
            cycles: life.cycles().len(),
            fault: self.fault().cloned(),
            pre_sweep: p.pre,
            post_sweep: p.post,
            lifetime,
        })
    }

    fn trial_body(
        &mut self,
        wave: &WaveformSpec,
        protocol: &Protocol,
        abort: &AbortSignal,
        cycles: &mut CycleTracker<WaveformSpec>,
        life: &mut LifetimeTracker,
        p: &mut Progress,
    ) -> Result<(), RigError> {
        if protocol.pre_sweep {
            self.switch_mode(ModeTarget::Impedance)?;
            p.pre = self.impedance_sweep(protocol.sweep_points)?;
        }
        self.switch_mode(ModeTarget::Displacement)?;

        let rate = protocol.effective_rate(wave);
        let dt = 1.0 / rate;
        let end = wave.duration.min(protocol.lifetime.cap);
        let decimate = ((rate / protocol.telemetry_rate.max(1e-9)).round() as u64).max(1);
        let mut next_force_check = protocol.force_check_interval;
        self.apply_drive(wave, 0.0)?;
        let mut k: u64 = 0;
        loop {
            let t = k as f64 * dt;
            if t > end + 1e-9 {
                break;
            }
            if abort.is_requested() {
                p.aborted = true;
                break;
            }
            self.elapse(t - p.wave_t);
            p.wave_t = t;
            let current = self.adapter_mut().read_current();
            let disp = self.adapter_mut().read_displacement();
            let (current, disp) = match (current, disp) {
                (Ok(c), Ok(d)) => (c, d),
                (Err(e), _) | (_, Err(e)) => {
                    return Err(self.enter_fault(FaultReason::Adapter(e.to_string())));
                }
            };
            if k % decimate == 0 {
                let voltage = self.adapter_mut().read_voltage().unwrap_or(0.0);
                self.emit_with(voltage, current, Some(disp), None)?;
            }
            if current > protocol.current_trip_ua {
                p.hard_failure_t = Some(t);
                break;
            }
            let closed = cycles
                .push(t, disp)
                .map_err(|e| RigError::Invalid(e.to_string()))?;
            if let Some(c) = closed {
                if life.push(c).is_some() && protocol.stop_on_threshold {
                    break;
                }
            }
            if let Some(at) = next_force_check {
                if t >= at && t < end {
                    self.force_check(wave, p)?;
                    cycles.break_segment();
                    let interval = protocol.force_check_interval.unwrap_or(f64::INFINITY);
                    next_force_check = Some(at + interval);
                    // resume on the sample grid
                    k = (p.wave_t / dt).ceil() as u64;
                    self.elapse(k as f64 * dt - p.wave_t);
                    p.wave_t = k as f64 * dt;
                    self.switch_mode(ModeTarget::Displacement)?;
                    self.apply_drive(wave, p.wave_t)?;
                    continue;
                }
            }
            k += 1;
        }
        self.stop_drive()?;
        if p.hard_failure_t.is_none() && !p.aborted {
            if let Some(c) = cycles.finish(dt) {
                life.push(c);
            }
        }
        if p.aborted {
            self.switch_mode(ModeTarget::Idle)?;
            return Ok(());
        }
        if protocol.post_sweep {
            self.switch_mode(ModeTarget::Impedance)?;
            p.post = self.impedance_sweep(protocol.sweep_points)?;
        }
        self.switch_mode(ModeTarget::Idle)
    }

    /// One drive period under the force sensor at the current waveform time.
    fn force_check(&mut self, wave: &WaveformSpec, p: &mut Progress) -> Result<(), RigError> {
        self.switch_mode(ModeTarget::Force)?;
        self.apply_drive(wave, p.wave_t)?;
        let period = 1.0 / wave.frequency_at(p.wave_t.min(wave.duration));
        let dt = period / 20.0;
        for _ in 0..20 {
            self.elapse(dt);
            p.wave_t += dt;
            let s = self.sample()?;
            if let Some(f) = s.force {
                p.peak_force = Some(p.peak_force.map_or(f, |m: f64| m.max(f)));
            }
        }
        self.stop_drive()
    }
}
