use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ChannelMode;

/// One acquisition record. Field names match the on-disk telemetry schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    /// Simulated seconds since the start of the current trial.
    #[serde(rename = "t_s")]
    pub t: f64,
    pub channel: u32,
    pub mode: ChannelMode,
    #[serde(rename = "voltage_v")]
    pub voltage: f64,
    #[serde(rename = "current_ua")]
    pub current: f64,
    #[serde(rename = "displacement_mm")]
    pub displacement: Option<f64>,
    #[serde(rename = "force_n")]
    pub force: Option<f64>,
    #[serde(rename = "clamp_force_n")]
    pub clamp_force: f64,
    pub hv_isolated: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("telemetry sink: {0}")]
pub struct SinkError(pub String);

pub trait TelemetrySink: Send {
    fn record(&mut self, sample: &TelemetrySample) -> Result<(), SinkError>;

    fn flush(&mut self) -> Result<(), SinkError> {
        Ok(())
    }
}

/// Discards everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl TelemetrySink for NullSink {
    fn record(&mut self, _: &TelemetrySample) -> Result<(), SinkError> {
        Ok(())
    }
}

impl TelemetrySink for Vec<TelemetrySample> {
    fn record(&mut self, sample: &TelemetrySample) -> Result<(), SinkError> {
        self.push(sample.clone());
        Ok(())
    }
}

/// In-memory sink whose buffer stays reachable after the sink is handed to
/// a rig.
#[derive(Debug, Default, Clone)]
pub struct SharedSink(pub Arc<Mutex<Vec<TelemetrySample>>>);

impl SharedSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn take(&self) -> Vec<TelemetrySample> {
        std::mem::take(&mut *self.0.lock().expect("sink lock"))
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("sink lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TelemetrySink for SharedSink {
    fn record(&mut self, sample: &TelemetrySample) -> Result<(), SinkError> {
        self.0.lock().map_err(|e| SinkError(e.to_string()))?.push(sample.clone());
        Ok(())
    }
}

/// Adapts a closure.
pub struct FnSink<F>(pub F);

impl<F> TelemetrySink for FnSink<F>
where
    F: FnMut(&TelemetrySample) -> Result<(), SinkError> + Send,
{
    fn record(&mut self, sample: &TelemetrySample) -> Result<(), SinkError> {
        (self.0)(sample)
    }
}

/// Sends each sample to two sinks. The first error wins.
pub struct Tee<A, B>(pub A, pub B);

impl<A: TelemetrySink, B: TelemetrySink> TelemetrySink for Tee<A, B> {
    fn record(&mut self, sample: &TelemetrySample) -> Result<(), SinkError> {
        self.0.record(sample)?;
        self.1.record(sample)
    }

    fn flush(&mut self) -> Result<(), SinkError> {
        self.0.flush()?;
        self.1.flush()
    }
}

impl TelemetrySink for Box<dyn TelemetrySink> {
    fn record(&mut self, sample: &TelemetrySample) -> Result<(), SinkError> {
        (**self).record(sample)
    }

    fn flush(&mut self) -> Result<(), SinkError> {
        (**self).flush()
    }
}

/// Holds the producer back so simulated time runs at most `accel` times
/// faster than wall time. Infinite or non-positive `accel` disables pacing.
pub struct Paced<S> {
    inner: S,
    accel: f64,
    origin: Option<(std::time::Instant, f64)>,
}

impl<S> Paced<S> {
    pub fn new(inner: S, accel: f64) -> Self {
        Self {
            inner,
            accel,
            origin: None,
        }
    }

    pub fn accel(&self) -> f64 {
        self.accel
    }

    /// Changes the acceleration; pacing restarts from the next sample.
    pub fn set_accel(&mut self, accel: f64) {
        self.accel = accel;
        self.origin = None;
    }

    pub fn inner_mut(&mut self) -> &mut S {
        &mut self.inner
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: TelemetrySink> TelemetrySink for Paced<S> {
    fn record(&mut self, sample: &TelemetrySample) -> Result<(), SinkError> {
        if self.accel.is_finite() && self.accel > 0.0 {
            let now = std::time::Instant::now();
            match self.origin {
                // trial clocks restart at zero
                Some((_, t0)) if sample.t < t0 => self.origin = Some((now, sample.t)),
                None => self.origin = Some((now, sample.t)),
                Some((w0, t0)) => {
                    let target = w0 + std::time::Duration::from_secs_f64((sample.t - t0) / self.accel);
                    if target > now {
                        std::thread::sleep(target - now);
                    }
                }
            }
        }
        self.inner.record(sample)
    }

    fn flush(&mut self) -> Result<(), SinkError> {
        self.inner.flush()
    }
}
