//! Control and telemetry service over simulated rig channels.
//!
//! HTTP (JSON):
//!
//! * `POST /campaigns` manifest body, optional `?accel=`; returns the id and
//!   the stage-1 plan
//! * `GET /campaigns/{id}`, `POST /campaigns/{id}/commands`
//! * `GET /channels`, `POST /channels/{id}/commands`
//! * `GET /runs/{id}/report`
//!
//! Streaming: `GET /stream?channels=0,1&rate=10` upgrades to a WebSocket that
//! pushes [`stream::Frame`]s and accepts [`stream::Subscribe`] messages.

pub mod api;
pub mod campaigns;
pub mod channels;
pub mod stream;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use dea_lab::rig::{SimConfig, SimFaults};
use tokio::sync::broadcast;

pub use api::router;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ACCEL: f64 = 1000.0;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub channels: u32,
    /// Root of campaign run directories.
    pub data_dir: PathBuf,
    /// Default simulated-time acceleration; non-finite means unpaced.
    pub accel: f64,
    pub sim: SimConfig,
    /// Injected simulator faults, by channel.
    pub faults: BTreeMap<u32, SimFaults>,
    pub broadcast_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            data_dir: PathBuf::from("runs"),
            accel: DEFAULT_ACCEL,
            sim: SimConfig::default(),
            faults: BTreeMap::new(),
            broadcast_capacity: 4096,
        }
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub channels: Vec<Arc<channels::ChannelHandle>>,
    pub campaigns: Mutex<BTreeMap<String, Arc<campaigns::Campaign>>>,
    pub frames: broadcast::Sender<Arc<stream::Frame>>,
}

impl AppState {
    /// Spawns one worker per channel.
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        let (frames, _) = broadcast::channel(config.broadcast_capacity.max(16));
        let channels = (0..config.channels)
            .map(|id| {
                let mut setup = channels::ChannelSetup::new(id, config.accel);
                setup.sim = config.sim.clone();
                setup.faults = config.faults.get(&id).cloned().unwrap_or_default();
                channels::spawn_channel(setup, frames.clone())
            })
            .collect();
        Arc::new(Self {
            config,
            channels,
            campaigns: Mutex::new(BTreeMap::new()),
            frames,
        })
    }
}
