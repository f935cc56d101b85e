//! One worker thread per rig channel. Every command to a channel goes
//! through its queue, so mode switches never interleave.

use std::sync::atomic::AtomicU64;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};

use dea_lab::calibration::Calibration;
use dea_lab::campaign::{execute_planned, PlannedTrial, ProgressEvent, TrialRecord};
use dea_lab::devicemodel::{DeviceModel, DeviceSpec};
use dea_lab::rig::{
    AbortSignal, ChannelMode, ChannelRig, FaultReason, Interlock, ModeTarget, NullSink, Paced, Protocol, RigError,
    SimBackend, SimConfig, SimFaults, SinkError, TelemetrySample, TelemetrySink,
};
use dea_lab::store::TelemetryWriter;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot};

use crate::stream::{Frame, StreamItem};

/// Snapshot served by `GET /channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStatus {
    pub id: u32,
    pub mode: ChannelMode,
    pub interlock: Interlock,
    pub fault: Option<FaultReason>,
    pub clamp_force_n: f64,
    /// Device id of the trial in progress.
    pub current_trial: Option<String>,
    /// Campaign holding the channel.
    pub owner: Option<String>,
    pub last_trial: Option<TrialRecord>,
    /// A command is queued or executing.
    pub busy: bool,
    pub accel: Option<f64>,
}

pub(crate) fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Telemetry log currently attached to a channel.
pub struct Attached {
    pub writer: TelemetryWriter,
    pub path: String,
    pub lines: Arc<AtomicU64>,
}

pub(crate) struct SinkState {
    pacer: Paced<NullSink>,
    file: Option<Attached>,
}

/// Rig sink: pacing, optional run-directory log, broadcast and status.
struct ChannelSink {
    id: u32,
    state: Arc<Mutex<SinkState>>,
    status: Arc<Mutex<ChannelStatus>>,
    tx: broadcast::Sender<Arc<Frame>>,
}

impl TelemetrySink for ChannelSink {
    fn record(&mut self, sample: &TelemetrySample) -> Result<(), SinkError> {
        let accel = {
            let mut st = lock(&self.state);
            st.pacer.record(sample)?;
            if let Some(f) = st.file.as_mut() {
                f.writer.record(sample)?;
            }
            st.pacer.accel()
        };
        {
            let mut s = lock(&self.status);
            s.mode = sample.mode;
            s.clamp_force_n = sample.clamp_force;
            s.interlock.hv_isolated = sample.hv_isolated;
            if s.current_trial.is_some() {
                s.interlock.hv_live = matches!(
                    sample.mode,
                    ChannelMode::ActuatingDisplacement | ChannelMode::MeasuringForce
                );
            }
        }
        let _ = self.tx.send(Arc::new(Frame::new(
            StreamItem::Telemetry {
                channel: self.id,
                sample: sample.clone(),
            },
            accel,
        )));
        Ok(())
    }

    fn flush(&mut self) -> Result<(), SinkError> {
        match lock(&self.state).file.as_mut() {
            Some(f) => f.writer.flush(),
            None => Ok(()),
        }
    }
}

pub struct TrialJob {
    pub planned: PlannedTrial,
    pub device: DeviceSpec,
    pub protocol: Protocol,
    /// Campaign the trial belongs to, for progress frames.
    pub campaign: Option<String>,
    /// Campaign cancellation; a cancelled trial aborts at its first sample.
    pub cancel: Option<AbortSignal>,
    pub reply: Option<oneshot::Sender<TrialRecord>>,
}

pub enum Job {
    SwitchMode {
        target: ModeTarget,
        reply: oneshot::Sender<Result<(), RigError>>,
    },
    ResetFault {
        reply: oneshot::Sender<Result<(), RigError>>,
    },
    Trial(Box<TrialJob>),
}

pub struct ChannelHandle {
    pub id: u32,
    tx: Mutex<mpsc::Sender<Job>>,
    pub status: Arc<Mutex<ChannelStatus>>,
    pub abort: AbortSignal,
    sink: Arc<Mutex<SinkState>>,
}

impl ChannelHandle {
    pub fn snapshot(&self) -> ChannelStatus {
        lock(&self.status).clone()
    }

    /// Enqueues a job; the caller has already marked the channel busy.
    pub fn enqueue(&self, job: Job) -> Result<(), String> {
        lock(&self.tx).send(job).map_err(|_| "channel worker stopped".to_string())
    }

    /// Routes telemetry to a run-directory log (or stops doing so) and sets
    /// the pacing. Only called while the channel is idle.
    pub fn attach(&self, file: Option<Attached>, accel: f64) -> Option<Attached> {
        let mut st = lock(&self.sink);
        st.pacer.set_accel(accel);
        lock(&self.status).accel = crate::stream::TimeBase::simulated(accel).accel;
        std::mem::replace(&mut st.file, file)
    }

}

fn ref_parts(sink: &Mutex<SinkState>) -> Option<(String, Arc<AtomicU64>)> {
    lock(sink).file.as_ref().map(|f| (f.path.clone(), f.lines.clone()))
}

pub struct ChannelSetup {
    pub id: u32,
    pub model: DeviceModel,
    pub sim: SimConfig,
    pub faults: SimFaults,
    pub accel: f64,
}

impl ChannelSetup {
    pub fn new(id: u32, accel: f64) -> Self {
        Self {
            id,
            model: DeviceModel::new(Calibration::default()),
            sim: SimConfig::default(),
            faults: SimFaults::default(),
            accel,
        }
    }
}

/// Starts the worker thread of one channel.
pub fn spawn_channel(setup: ChannelSetup, tx_frames: broadcast::Sender<Arc<Frame>>) -> Arc<ChannelHandle> {
    let id = setup.id;
    let status = Arc::new(Mutex::new(ChannelStatus {
        id,
        mode: ChannelMode::Idle,
        interlock: Interlock::default(),
        fault: None,
        clamp_force_n: 0.0,
        current_trial: None,
        owner: None,
        last_trial: None,
        busy: false,
        accel: crate::stream::TimeBase::simulated(setup.accel).accel,
    }));
    let sink = Arc::new(Mutex::new(SinkState {
        pacer: Paced::new(NullSink, setup.accel),
        file: None,
    }));
    let (tx, rx) = mpsc::channel();
    let handle = Arc::new(ChannelHandle {
        id,
        tx: Mutex::new(tx),
        status: status.clone(),
        abort: AbortSignal::new(),
        sink: sink.clone(),
    });
    let abort = handle.abort.clone();
    let worker_sink = sink.clone();
    std::thread::Builder::new()
        .name(format!("channel-{id}"))
        .spawn(move || {
            let mut backend =
                SimBackend::with_config(setup.model, DeviceSpec::test_sample(), u64::from(id), setup.sim);
            backend.faults = setup.faults;
            let mut rig = ChannelRig::new(id, backend);
            rig.set_sink(Box::new(ChannelSink {
                id,
                state: sink,
                status: status.clone(),
                tx: tx_frames.clone(),
            }));
            let mut w = Worker {
                rig,
                status,
                tx: tx_frames,
                abort,
                sink: worker_sink,
            };
            w.sync();
            for job in rx {
                w.run(job);
            }
        })
        .expect("spawn channel worker");
    handle
}

struct Worker {
    rig: ChannelRig<SimBackend>,
    status: Arc<Mutex<ChannelStatus>>,
    tx: broadcast::Sender<Arc<Frame>>,
    abort: AbortSignal,
    sink: Arc<Mutex<SinkState>>,
}

impl Worker {
    fn run(&mut self, job: Job) {
        match job {
            Job::SwitchMode { target, reply } => {
                let r = self.rig.switch_mode(target);
                self.finish();
                let _ = reply.send(r);
            }
            Job::ResetFault { reply } => {
                let r = self.rig.reset_fault();
                self.finish();
                let _ = reply.send(r);
            }
            Job::Trial(job) => {
                let rec = self.trial(&job);
                {
                    let mut s = lock(&self.status);
                    s.last_trial = Some(rec.clone());
                    s.current_trial = None;
                }
                self.finish();
                if let Some(r) = job.reply {
                    let _ = r.send(rec);
                }
            }
        }
    }

    fn trial(&mut self, job: &TrialJob) -> TrialRecord {
        let id = self.rig.id();
        lock(&self.status).current_trial = Some(job.planned.device_id.clone());
        if job.cancel.as_ref().is_some_and(|c| c.is_requested()) {
            self.abort.request();
        }
        self.progress(
            job,
            ProgressEvent::TrialStarted {
                device_id: job.planned.device_id.clone(),
                channel: id,
            },
        );
        let parts = ref_parts(&self.sink);
        let path = parts
            .as_ref()
            .map_or_else(|| format!("telemetry/ch{id}.jsonl"), |p| p.0.clone());
        let rec = execute_planned(
            &mut self.rig,
            &job.planned,
            &job.device,
            &job.protocol,
            &self.abort,
            &path,
            parts.as_ref().map(|p| p.1.as_ref()),
        );
        self.abort.clear();
        self.progress(
            job,
            ProgressEvent::TrialEnded {
                device_id: rec.device_id.clone(),
                channel: id,
                status: rec.status,
                lifetime: rec.lifetime.lifetime,
            },
        );
        rec
    }

    fn progress(&self, job: &TrialJob, event: ProgressEvent) {
        if let Some(c) = &job.campaign {
            let accel = lock(&self.status).accel.unwrap_or(f64::INFINITY);
            let _ = self.tx.send(Arc::new(Frame::new(
                StreamItem::Progress {
                    campaign: c.clone(),
                    event,
                },
                accel,
            )));
        }
    }

    /// Mirrors rig state into the status and announces new faults.
    fn sync(&mut self) -> Option<FaultReason> {
        let mut s = lock(&self.status);
        let newly = match (&s.fault, self.rig.fault()) {
            (None, Some(f)) => Some(f.clone()),
            _ => None,
        };
        s.mode = self.rig.mode();
        s.interlock = self.rig.interlock();
        s.fault = self.rig.fault().cloned();
        newly
    }

    fn finish(&mut self) {
        if let Some(reason) = self.sync() {
            let accel = lock(&self.status).accel.unwrap_or(f64::INFINITY);
            let _ = self.tx.send(Arc::new(Frame::new(
                StreamItem::Fault {
                    channel: self.rig.id(),
                    reason,
                },
                accel,
            )));
        }
        lock(&self.status).busy = false;
    }
}
