//! Telemetry reducers: per-cycle displacement amplitudes, lifetime with
//! censoring, average displacement and capacitance degradation.
//!
//! The reducers are streaming; the batch functions feed whole traces through
//! the same state machines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::waveform::WaveformSpec;

/// Probe frequency at which capacitance degradation is reported, Hz.
pub const DEGRADATION_REFERENCE_HZ: f64 = 1.0e4;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("trace undersampled: sample spacing {dt} s exceeds a quarter period ({max} s)")]
    Undersampled { dt: f64, max: f64 },
    #[error("trace spans fewer than two drive periods")]
    TooShort,
    #[error("timestamps must be strictly increasing (at index {0})")]
    NonMonotonic(usize),
    #[error("insufficient data: {got} cycles, need {need}")]
    InsufficientData { got: usize, need: usize },
    #[error("empty averaging window")]
    EmptyWindow,
    #[error("sweeps do not share probe frequencies")]
    SweepMismatch,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Maps time onto drive periods.
pub trait DriveClock {
    fn cycle_of(&self, t: f64) -> u64;
    fn center_of(&self, cycle: u64) -> f64;
    fn period_at(&self, t: f64) -> f64;
}

/// Fixed-frequency drive clock.
#[derive(Debug, Clone, Copy)]
pub struct ConstantFrequency(pub f64);

impl DriveClock for ConstantFrequency {
    fn cycle_of(&self, t: f64) -> u64 {
        (t * self.0).floor().max(0.0) as u64
    }
    fn center_of(&self, cycle: u64) -> f64 {
        (cycle as f64 + 0.5) / self.0
    }
    fn period_at(&self, _t: f64) -> f64 {
        1.0 / self.0
    }
}

impl DriveClock for WaveformSpec {
    fn cycle_of(&self, t: f64) -> u64 {
        self.cycle_index(t)
    }
    fn center_of(&self, cycle: u64) -> f64 {
        self.time_at_phase(cycle as f64 + 0.5)
    }
    fn period_at(&self, t: f64) -> f64 {
        1.0 / self.frequency_at(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementTrace {
    /// (t s, displacement mm)
    pub samples: Vec<(f64, f64)>,
    /// Hz
    pub drive_freq: f64,
}

impl DisplacementTrace {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        for (i, w) in self.samples.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(AnalysisError::NonMonotonic(i + 1));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleAmplitude {
    /// Period center, s.
    pub t: f64,
    /// Peak-to-peak displacement within the period, mm.
    pub amplitude: f64,
}

/// Streaming peak-to-peak extractor, one value per completed drive period.
#[derive(Debug, Clone)]
pub struct CycleTracker<C: DriveClock> {
    clock: C,
    current: Option<OpenCycle>,
    last_t: Option<f64>,
    spans: f64,
}

#[derive(Debug, Clone, Copy)]
struct OpenCycle {
    index: u64,
    first_t: f64,
    last_t: f64,
    min: f64,
    max: f64,
}

impl<C: DriveClock> CycleTracker<C> {
    pub fn new(clock: C) -> Self {
        Self {
            clock,
            current: None,
            last_t: None,
            spans: 0.0,
        }
    }

    pub fn clock(&self) -> &C {
        &self.clock
    }

    /// Feeds one sample; returns the amplitude of a period that just closed.
    pub fn push(&mut self, t: f64, displacement: f64) -> Result<Option<CycleAmplitude>, AnalysisError> {
        if let Some(prev) = self.last_t {
            if !(t > prev) {
                return Err(AnalysisError::NonMonotonic(0));
            }
            let dt = t - prev;
            let max = self.clock.period_at(t) / 4.0;
            if dt > max * (1.0 + 1e-9) {
                return Err(AnalysisError::Undersampled { dt, max });
            }
            self.spans += dt;
        }
        self.last_t = Some(t);
        let index = self.clock.cycle_of(t);
        let mut closed = None;
        match &mut self.current {
            Some(c) if c.index == index => {
                c.last_t = t;
                c.min = c.min.min(displacement);
                c.max = c.max.max(displacement);
                return Ok(None);
            }
            Some(c) => {
                closed = Some(CycleAmplitude {
                    t: self.clock.center_of(c.index),
                    amplitude: c.max - c.min,
                });
            }
            None => {}
        }
        self.current = Some(OpenCycle {
            index,
            first_t: t,
            last_t: t,
            min: displacement,
            max: displacement,
        });
        Ok(closed)
    }

    /// Drops the open period (used when acquisition pauses mid-drive).
    pub fn break_segment(&mut self) {
        self.current = None;
        self.last_t = None;
    }

    /// Closes the final period if its samples cover it (to within 1.5 sample
    /// intervals).
    pub fn finish(&mut self, sample_dt: f64) -> Option<CycleAmplitude> {
        let c = self.current.take()?;
        let period = self.clock.period_at(c.first_t);
        if c.last_t - c.first_t >= period - 1.5 * sample_dt {
            Some(CycleAmplitude {
                t: self.clock.center_of(c.index),
                amplitude: c.max - c.min,
            })
        } else {
            None
        }
    }

    /// Total time covered by fed samples.
    pub fn span(&self) -> f64 {
        self.spans
    }
}

/// Batch per-period peak-to-peak amplitudes of a displacement trace.
pub fn cycle_amplitudes(trace: &DisplacementTrace) -> Result<Vec<CycleAmplitude>, AnalysisError> {
    trace.validate()?;
    if trace.samples.len() < 2 {
        return Err(AnalysisError::TooShort);
    }
    let mut tracker = CycleTracker::new(ConstantFrequency(trace.drive_freq));
    let mut out = Vec::new();
    for &(t, d) in &trace.samples {
        if let Some(a) = tracker.push(t, d)? {
            out.push(a);
        }
    }
    if tracker.span() < 2.0 / trace.drive_freq * (1.0 - 1e-9) {
        return Err(AnalysisError::TooShort);
    }
    let n = trace.samples.len();
    let dt = trace.samples[n - 1].0 - trace.samples[n - 2].0;
    out.extend(tracker.finish(dt));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerminalCause {
    ThresholdCrossed,
    HardFailure,
    Cap,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifetimeResult {
    /// s
    pub lifetime: f64,
    pub censored: bool,
    /// mm
    pub initial_amplitude: f64,
    pub terminal_cause: TerminalCause,
}

/// How the reference amplitude is estimated from the first cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialEstimate {
    /// Theil-Sen line through the first window, evaluated at the first cycle.
    #[default]
    TrendAtStart,
    /// Plain median of the first window.
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifetimeParams {
    /// Fraction of the initial amplitude that ends life.
    pub threshold: f64,
    /// s
    pub cap: f64,
    pub init_window: usize,
    /// Centered moving-median window, cycles (odd).
    pub median_window: usize,
    /// Consecutive below-threshold cycles required.
    pub persistence: usize,
    pub initial_estimate: InitialEstimate,
}

impl Default for LifetimeParams {
    fn default() -> Self {
        Self {
            threshold: 0.8,
            cap: 10_800.0,
            init_window: 10,
            median_window: 5,
            persistence: 5,
            initial_estimate: InitialEstimate::TrendAtStart,
        }
    }
}

impl LifetimeParams {
    /// Older 50% end-of-life convention.
    pub fn half_amplitude() -> Self {
        Self {
            threshold: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(AnalysisError::InvalidParameter("threshold must lie in (0, 1)".into()));
        }
        if !(self.cap > 0.0) {
            return Err(AnalysisError::InvalidParameter("cap must be > 0".into()));
        }
        if self.init_window == 0 || self.persistence == 0 || self.median_window % 2 == 0 {
            return Err(AnalysisError::InvalidParameter(
                "init_window and persistence must be >= 1, median_window odd".into(),
            ));
        }
        Ok(())
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn initial_amplitude(window: &[CycleAmplitude], how: InitialEstimate) -> f64 {
    let mut amps: Vec<f64> = window.iter().map(|c| c.amplitude).collect();
    match how {
        InitialEstimate::Median => median(&mut amps),
        InitialEstimate::TrendAtStart => {
            if window.len() < 2 {
                return median(&mut amps);
            }
            let mut slopes = Vec::with_capacity(window.len() * (window.len() - 1) / 2);
            for i in 0..window.len() {
                for j in i + 1..window.len() {
                    slopes.push((window[j].amplitude - window[i].amplitude) / (window[j].t - window[i].t));
                }
            }
            let slope = median(&mut slopes);
            let t0 = window[0].t;
            let mut intercepts: Vec<f64> = window.iter().map(|c| c.amplitude - slope * (c.t - t0)).collect();
            median(&mut intercepts)
        }
    }
}

/// Streaming lifetime detector over cycle amplitudes.
#[derive(Debug, Clone)]
pub struct LifetimeTracker {
    params: LifetimeParams,
    cycles: Vec<CycleAmplitude>,
    initial: Option<f64>,
    /// Next index whose smoothed value has not been evaluated.
    next_eval: usize,
    /// Start of the current below-threshold run.
    run_start: Option<usize>,
    crossing: Option<usize>,
}

impl LifetimeTracker {
    pub fn new(params: LifetimeParams) -> Self {
        Self {
            params,
            cycles: Vec::new(),
            initial: None,
            next_eval: 0,
            run_start: None,
            crossing: None,
        }
    }

    pub fn params(&self) -> &LifetimeParams {
        &self.params
    }

    pub fn cycles(&self) -> &[CycleAmplitude] {
        &self.cycles
    }

    pub fn initial_amplitude(&self) -> Option<f64> {
        self.initial
    }

    /// Time of the confirmed threshold crossing, if any.
    pub fn crossing_time(&self) -> Option<f64> {
        self.crossing.map(|i| self.cycles[i].t)
    }

    fn half(&self) -> usize {
        self.params.median_window / 2
    }

    fn smoothed(&self, i: usize) -> f64 {
        let h = self.half();
        let lo = i.saturating_sub(h);
        let hi = (i + h).min(self.cycles.len() - 1);
        let mut w: Vec<f64> = self.cycles[lo..=hi].iter().map(|c| c.amplitude).collect();
        median(&mut w)
    }

    fn evaluate(&mut self, upto: usize) {
        let Some(a0) = self.initial else { return };
        let level = self.params.threshold * a0;
        while self.crossing.is_none() && self.next_eval < upto {
            let i = self.next_eval;
            if self.smoothed(i) < level {
                let start = *self.run_start.get_or_insert(i);
                if i + 1 - start >= self.params.persistence {
                    self.crossing = Some(start);
                }
            } else {
                self.run_start = None;
            }
            self.next_eval += 1;
        }
    }

    /// Feeds one amplitude; returns the crossing time once it is confirmed.
    pub fn push(&mut self, c: CycleAmplitude) -> Option<f64> {
        self.cycles.push(c);
        if self.initial.is_none() && self.cycles.len() >= self.params.init_window {
            self.initial = Some(initial_amplitude(
                &self.cycles[..self.params.init_window],
                self.params.initial_estimate,
            ));
        }
        // smoothed(i) is final once i + half cycles exist
        let ready = self.cycles.len().saturating_sub(self.half());
        self.evaluate(ready);
        self.crossing_time()
    }

    /// Evaluates the tail with truncated windows and produces the verdict.
    pub fn finish(&mut self, hard_failure_t: Option<f64>) -> Result<LifetimeResult, AnalysisError> {
        let n = self.cycles.len();
        self.evaluate(n);
        let cap = self.params.cap;
        let Some(a0) = self.initial else {
            if let Some(tf) = hard_failure_t {
                let mut amps: Vec<f64> = self.cycles.iter().map(|c| c.amplitude).collect();
                return Ok(LifetimeResult {
                    lifetime: tf.min(cap),
                    censored: false,
                    initial_amplitude: if amps.is_empty() { 0.0 } else { median(&mut amps) },
                    terminal_cause: TerminalCause::HardFailure,
                });
            }
            return Err(AnalysisError::InsufficientData {
                got: n,
                need: self.params.init_window,
            });
        };
        let crossing = self.crossing_time();
        let (lifetime, cause) = match (crossing, hard_failure_t) {
            (Some(tc), Some(tf)) if tf < tc => (tf, TerminalCause::HardFailure),
            (Some(tc), _) => (tc, TerminalCause::ThresholdCrossed),
            (None, Some(tf)) => (tf, TerminalCause::HardFailure),
            (None, None) => (cap, TerminalCause::Cap),
        };
        if lifetime >= cap {
            return Ok(LifetimeResult {
                lifetime: cap,
                censored: true,
                initial_amplitude: a0,
                terminal_cause: TerminalCause::Cap,
            });
        }
        Ok(LifetimeResult {
            lifetime,
            censored: false,
            initial_amplitude: a0,
            terminal_cause: cause,
        })
    }
}

/// Lifetime of a sequence of cycle amplitudes.
pub fn lifetime(
    amplitudes: &[CycleAmplitude],
    params: &LifetimeParams,
    hard_failure_t: Option<f64>,
) -> Result<LifetimeResult, AnalysisError> {
    params.validate()?;
    let mut tracker = LifetimeTracker::new(params.clone());
    for &c in amplitudes {
        tracker.push(c);
    }
    tracker.finish(hard_failure_t)
}

/// Arithmetic mean of cycle amplitudes with `t <= until`.
pub fn average_displacement(amplitudes: &[CycleAmplitude], until: f64) -> Result<f64, AnalysisError> {
    let (sum, n) = amplitudes
        .iter()
        .take_while(|c| c.t <= until)
        .fold((0.0, 0usize), |(s, n), c| (s + c.amplitude, n + 1));
    if n == 0 {
        return Err(AnalysisError::EmptyWindow);
    }
    Ok(sum / n as f64)
}

/// One point of an impedance sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Hz
    pub probe_freq: f64,
    /// nF
    pub capacitance: f64,
}

fn capacitance_at(sweep: &[SweepPoint], f: f64) -> Option<f64> {
    let lf = f.ln();
    sweep.windows(2).find_map(|w| {
        let (a, b) = (w[0].probe_freq.ln(), w[1].probe_freq.ln());
        if (a..=b).contains(&lf) {
            let s = if b > a { (lf - a) / (b - a) } else { 0.0 };
            Some(w[0].capacitance + s * (w[1].capacitance - w[0].capacitance))
        } else {
            None
        }
    })
}

/// Fractional capacitance loss `1 - post/pre` at 10 kHz (log-frequency
/// interpolation between sweep points).
pub fn capacitance_degradation(pre: &[SweepPoint], post: &[SweepPoint]) -> Result<f64, AnalysisError> {
    if pre.len() != post.len()
        || pre.len() < 2
        || pre
            .iter()
            .zip(post)
            .any(|(a, b)| ((a.probe_freq - b.probe_freq) / a.probe_freq).abs() > 1e-9)
    {
        return Err(AnalysisError::SweepMismatch);
    }
    let before = capacitance_at(pre, DEGRADATION_REFERENCE_HZ).ok_or(AnalysisError::SweepMismatch)?;
    let after = capacitance_at(post, DEGRADATION_REFERENCE_HZ).ok_or(AnalysisError::SweepMismatch)?;
    Ok(1.0 - after / before)
}
