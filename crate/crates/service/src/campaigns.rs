//! Campaigns scheduled onto the service's channel workers.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use dea_lab::campaign::{
    run_campaign, summarize, CampaignError, CellSummary, ExecContext, Manifest, MaterialSelection, PlannedTrial,
    ProgressEvent, TrialExecutor, TrialRecord,
};
use dea_lab::devicemodel::Drive;
use dea_lab::rig::AbortSignal;
use dea_lab::store::RunDirectory;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot};

use dea_lab::rig::TelemetrySink;

use crate::channels::{lock, Attached, ChannelHandle, Job, TrialJob};
use crate::stream::{Frame, StreamItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignState {
    Running,
    Finished,
    Cancelled,
    Failed,
}

#[derive(Debug, Default)]
struct Progress {
    stage: u8,
    records: Vec<TrialRecord>,
    boundary: Vec<Drive>,
    selections: Vec<MaterialSelection>,
    error: Option<String>,
}

pub struct Campaign {
    pub id: String,
    pub run_dir: PathBuf,
    pub manifest: Manifest,
    pub channels: Vec<Arc<ChannelHandle>>,
    pub cancel: AbortSignal,
    state: Mutex<CampaignState>,
    progress: Mutex<Progress>,
}

/// Served by `GET /campaigns/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignView {
    pub schema_version: u32,
    pub id: String,
    pub name: String,
    pub state: CampaignState,
    pub stage: u8,
    pub trials_completed: usize,
    pub running_trials: Vec<RunningTrial>,
    pub cells: Vec<CellSummary>,
    pub boundary: Vec<Drive>,
    pub selections: Vec<MaterialSelection>,
    pub error: Option<String>,
    pub report_ready: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningTrial {
    pub device_id: String,
    pub channel: u32,
}

impl Campaign {
    pub fn state(&self) -> CampaignState {
        *lock(&self.state)
    }

    pub fn view(&self) -> CampaignView {
        let p = lock(&self.progress);
        let reps = self.manifest.space.replicates_per_cell;
        let cells = (1..=3).flat_map(|s| summarize(&p.records, s, reps)).collect();
        let running_trials = self
            .channels
            .iter()
            .filter_map(|c| {
                let s = c.snapshot();
                s.current_trial.map(|device_id| RunningTrial {
                    device_id,
                    channel: s.id,
                })
            })
            .collect();
        let state = self.state();
        CampaignView {
            schema_version: crate::SCHEMA_VERSION,
            id: self.id.clone(),
            name: self.manifest.name.clone(),
            state,
            stage: p.stage,
            trials_completed: p.records.len(),
            running_trials,
            cells,
            boundary: p.boundary.clone(),
            selections: p.selections.clone(),
            error: p.error.clone(),
            report_ready: state == CampaignState::Finished,
        }
    }

    /// Cancels between batches and aborts the trials in flight.
    pub fn abort(&self) {
        self.cancel.request();
        for c in &self.channels {
            if lock(&c.status).current_trial.is_some() {
                c.abort.request();
            }
        }
    }
}

/// Dispatches each batch round-robin onto the campaign's channels and waits
/// for every record.
struct ServiceExecutor {
    campaign: String,
    cancel: AbortSignal,
    channels: Vec<Arc<ChannelHandle>>,
}

impl TrialExecutor for ServiceExecutor {
    fn execute(&mut self, batch: &[PlannedTrial], ctx: &ExecContext<'_>) -> Result<Vec<TrialRecord>, CampaignError> {
        let n = self.channels.len();
        let mut replies = Vec::with_capacity(batch.len());
        for (i, t) in batch.iter().enumerate() {
            let ch = &self.channels[i % n];
            let (tx, rx) = oneshot::channel();
            lock(&ch.status).busy = true;
            ch.enqueue(Job::Trial(Box::new(TrialJob {
                planned: t.clone(),
                device: ctx.device.clone(),
                protocol: ctx.protocol.clone(),
                campaign: Some(self.campaign.clone()),
                cancel: Some(self.cancel.clone()),
                reply: Some(tx),
            })))
            .map_err(CampaignError::Execution)?;
            replies.push(rx);
        }
        let mut out = Vec::with_capacity(batch.len());
        for rx in replies {
            let rec = rx
                .blocking_recv()
                .map_err(|_| CampaignError::Execution("channel worker dropped a trial".into()))?;
            out.push(rec);
        }
        Ok(out)
    }
}

/// Claims the channels, creates the run directory and starts the scheduler
/// thread. Returns the stage-1 plan echo.
pub fn start(
    id: String,
    manifest: Manifest,
    run_dir: PathBuf,
    channels: Vec<Arc<ChannelHandle>>,
    accel: f64,
    tx: broadcast::Sender<Arc<Frame>>,
) -> Result<Arc<Campaign>, String> {
    let mut run = RunDirectory::create(&run_dir, &manifest, now_epoch()).map_err(|e| e.to_string())?;
    for c in &channels {
        let w = run.telemetry_writer(c.id).map_err(|e| e.to_string())?;
        let lines = w.line_counter();
        c.attach(
            Some(Attached {
                writer: w,
                path: RunDirectory::telemetry_rel(c.id),
                lines,
            }),
            accel,
        );
    }
    let campaign = Arc::new(Campaign {
        id: id.clone(),
        run_dir,
        manifest,
        channels,
        cancel: AbortSignal::new(),
        state: Mutex::new(CampaignState::Running),
        progress: Mutex::new(Progress::default()),
    });
    let c = campaign.clone();
    std::thread::Builder::new()
        .name(format!("campaign-{id}"))
        .spawn(move || {
            let mut exec = ServiceExecutor {
                campaign: c.id.clone(),
                cancel: c.cancel.clone(),
                channels: c.channels.clone(),
            };
            let publish = |event: ProgressEvent| {
                {
                    let mut p = lock(&c.progress);
                    match &event {
                        ProgressEvent::StageStarted { stage, .. } => p.stage = *stage,
                        ProgressEvent::BoundarySelected { drives } => p.boundary = drives.clone(),
                        ProgressEvent::MaterialSelected { selections } => p.selections = selections.clone(),
                        _ => {}
                    }
                }
                let _ = tx.send(Arc::new(Frame::new(
                    StreamItem::Progress {
                        campaign: c.id.clone(),
                        event,
                    },
                    accel,
                )));
            };
            let mut on_record = |r: &TrialRecord| -> Result<(), CampaignError> {
                run.write_trial(r)?;
                lock(&c.progress).records.push(r.clone());
                Ok(())
            };
            let res = run_campaign(&c.manifest, &mut exec, &mut on_record, &publish, &c.cancel);
            let res = res.and_then(|o| Ok(run.write_report(&o.report)?));
            for ch in &c.channels {
                if let Some(mut a) = ch.attach(None, accel) {
                    let _ = a.writer.flush();
                }
                let mut s = lock(&ch.status);
                s.owner = None;
                ch.abort.clear();
            }
            run.close();
            let state = match res {
                Ok(()) => CampaignState::Finished,
                Err(CampaignError::Cancelled) => CampaignState::Cancelled,
                Err(e) => {
                    lock(&c.progress).error = Some(e.to_string());
                    CampaignState::Failed
                }
            };
            *lock(&c.state) = state;
        })
        .map_err(|e| e.to_string())?;
    Ok(campaign)
}

fn now_epoch() -> Option<u64> {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs())
}
