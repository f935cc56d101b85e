//! Frames pushed over the telemetry stream.

use std::collections::BTreeMap;

use dea_lab::campaign::ProgressEvent;
use dea_lab::rig::{FaultReason, TelemetrySample};
use serde::{Deserialize, Serialize};

use crate::SCHEMA_VERSION;

/// Default client decimation rate, Hz.
pub const DEFAULT_STREAM_RATE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamItem {
    Telemetry {
        channel: u32,
        sample: TelemetrySample,
    },
    Progress {
        campaign: String,
        event: ProgressEvent,
    },
    Fault {
        channel: u32,
        reason: FaultReason,
    },
    /// The client fell behind and `skipped` items were dropped.
    Lagged {
        skipped: u64,
    },
}

/// Simulated-time base of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeBase {
    pub clock: Clock,
    /// Simulated seconds per wall second; null when unpaced.
    pub accel: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    Simulated,
}

impl TimeBase {
    pub fn simulated(accel: f64) -> Self {
        Self {
            clock: Clock::Simulated,
            accel: (accel.is_finite() && accel > 0.0).then_some(accel),
        }
    }
}

/// Broadcast unit: an item plus the time base it was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub schema_version: u32,
    pub time_base: TimeBase,
    #[serde(flatten)]
    pub item: StreamItem,
}

impl Frame {
    pub fn new(item: StreamItem, accel: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            time_base: TimeBase::simulated(accel),
            item,
        }
    }
}

/// Client message changing its subscription. Absent fields keep their value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Subscribe {
    pub channels: Option<Vec<u32>>,
    /// Hz
    pub rate: Option<f64>,
}

/// Passes at most one sample per `1/rate` seconds of trial time. A clock
/// that runs backwards (a new trial) restarts the grid.
#[derive(Debug, Clone)]
pub struct Decimator {
    period: f64,
    last: Option<f64>,
}

impl Decimator {
    pub fn new(rate: f64) -> Self {
        Self {
            period: if rate > 0.0 { 1.0 / rate } else { 0.0 },
            last: None,
        }
    }

    pub fn accept(&mut self, t: f64) -> bool {
        let take = match self.last {
            None => true,
            Some(l) => t < l || t - l >= self.period - 1e-9,
        };
        if take {
            self.last = Some(t);
        }
        take
    }
}

/// Per-client filter state.
#[derive(Debug, Clone)]
pub struct ClientFilter {
    channels: Option<Vec<u32>>,
    rate: f64,
    decimators: BTreeMap<u32, Decimator>,
}

impl ClientFilter {
    pub fn new(channels: Option<Vec<u32>>, rate: Option<f64>) -> Self {
        Self {
            channels,
            rate: rate.unwrap_or(DEFAULT_STREAM_RATE),
            decimators: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, s: Subscribe) {
        if s.channels.is_some() {
            self.channels = s.channels;
        }
        if let Some(r) = s.rate {
            self.rate = r;
            self.decimators.clear();
        }
    }

    pub fn wants_channel(&self, ch: u32) -> bool {
        self.channels.as_ref().is_none_or(|c| c.contains(&ch))
    }

    pub fn accept(&mut self, item: &StreamItem) -> bool {
        match item {
            StreamItem::Telemetry { channel, sample } => {
                if !self.wants_channel(*channel) {
                    return false;
                }
                let rate = self.rate;
                self.decimators
                    .entry(*channel)
                    .or_insert_with(|| Decimator::new(rate))
                    .accept(sample.t)
            }
            StreamItem::Fault { channel, .. } => self.wants_channel(*channel),
            StreamItem::Progress { .. } | StreamItem::Lagged { .. } => true,
        }
    }
}
