use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    compile_report, plan_stage1, plan_stage2, plan_stage3, select_best_material, select_boundary,
    select_boundary_at, summarize, CampaignError, CampaignReport, Cell, CellStatus, Manifest, MaterialSelection,
    PlannedTrial, TrialRecord,
};
use crate::analysis::{LifetimeResult, TerminalCause};
use crate::calibration::Calibration;
use crate::devicemodel::{DeviceModel, DeviceSpec, Drive};
use crate::rig::{
    AbortSignal, ChannelMode, ChannelRig, NullSink, Protocol, SimBackend, SimRig, TelemetrySink, TrialStatus,
};
use crate::waveform::WaveformSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum ProgressEvent {
    StageStarted { stage: u8, trials: usize },
    TrialStarted { device_id: String, channel: u32 },
    TrialEnded { device_id: String, channel: u32, status: TrialStatus, lifetime: f64 },
    CellCompleted { stage: u8, cell: Cell, status: CellStatus },
    BoundarySelected { drives: Vec<Drive> },
    MaterialSelected { selections: Vec<MaterialSelection> },
    CampaignFinished { trials: usize },
}

pub struct ExecContext<'a> {
    pub model: &'a DeviceModel,
    /// Device geometry; the material comes from each trial's cell.
    pub device: &'a DeviceSpec,
    pub protocol: &'a Protocol,
    pub progress: &'a (dyn Fn(ProgressEvent) + Sync),
}

/// Runs batches of planned trials on rig channels.
pub trait TrialExecutor {
    /// Returns one record per planned trial, in plan order.
    fn execute(&mut self, batch: &[PlannedTrial], ctx: &ExecContext<'_>) -> Result<Vec<TrialRecord>, CampaignError>;
}

/// Telemetry and control attachments of one channel.
pub struct ChannelHooks {
    pub sink: Box<dyn TelemetrySink>,
    /// Lines written so far by `sink`; used to build telemetry refs.
    pub lines: Option<Arc<AtomicU64>>,
    /// Path of the channel log relative to the run directory.
    pub telemetry_path: String,
    pub abort: AbortSignal,
}

impl ChannelHooks {
    pub fn detached(channel: u32) -> Self {
        Self {
            sink: Box::new(NullSink),
            lines: None,
            telemetry_path: format!("telemetry/ch{channel}.jsonl"),
            abort: AbortSignal::new(),
        }
    }
}

/// Runs one planned trial on a simulated channel and turns the outcome into
/// a record. A faulted channel is reset first.
pub fn execute_planned(
    rig: &mut SimRig,
    trial: &PlannedTrial,
    device: &DeviceSpec,
    protocol: &Protocol,
    abort: &AbortSignal,
    telemetry_path: &str,
    lines: Option<&AtomicU64>,
) -> TrialRecord {
    if rig.mode() == ChannelMode::Faulted {
        let _ = rig.reset_fault();
    }
    let spec = device.clone().with_material(trial.cell.material);
    rig.adapter_mut().mount(spec, trial.seed);
    let wave = WaveformSpec::dc_square(trial.cell.field, trial.cell.freq, protocol.lifetime.cap);
    let count = || lines.map_or(0, |l| l.load(Ordering::SeqCst));
    let first = count() + 1;
    let outcome = rig.run_trial(&wave, protocol, abort);
    let last = count();
    let telemetry_ref = format!("{telemetry_path}#L{first}-L{last}");
    match outcome {
        Ok(o) => TrialRecord {
            stage: trial.stage,
            cell: trial.cell,
            replicate: trial.replicate,
            device_id: trial.device_id.clone(),
            seed: trial.seed,
            channel: rig.id(),
            status: o.status,
            avg_displacement: o.avg_displacement,
            capacitance_loss: o.capacitance_loss,
            duration: o.duration,
            lifetime: o.lifetime,
            telemetry_ref,
        },
        Err(_) => TrialRecord {
            stage: trial.stage,
            cell: trial.cell,
            replicate: trial.replicate,
            device_id: trial.device_id.clone(),
            seed: trial.seed,
            channel: rig.id(),
            status: TrialStatus::Faulted,
            avg_displacement: None,
            capacitance_loss: None,
            duration: 0.0,
            lifetime: LifetimeResult {
                lifetime: 0.0,
                censored: false,
                initial_amplitude: 0.0,
                terminal_cause: TerminalCause::Aborted,
            },
            telemetry_ref,
        },
    }
}

struct Slot {
    rig: Option<SimRig>,
    hooks: Option<ChannelHooks>,
    id: u32,
    lines: Option<Arc<AtomicU64>>,
    path: String,
    abort: AbortSignal,
}

/// Runs trials on simulated channels, one thread per channel. Trial `i` of a
/// batch goes to channel `i % channels`.
pub struct LocalExecutor {
    slots: Vec<Slot>,
}

impl LocalExecutor {
    pub fn new(channels: u32) -> Self {
        Self::with_hooks((0..channels.max(1)).map(ChannelHooks::detached).collect())
    }

    pub fn with_hooks(hooks: Vec<ChannelHooks>) -> Self {
        let slots = hooks
            .into_iter()
            .enumerate()
            .map(|(i, h)| Slot {
                rig: None,
                lines: h.lines.clone(),
                path: h.telemetry_path.clone(),
                abort: h.abort.clone(),
                hooks: Some(h),
                id: i as u32,
            })
            .collect();
        Self { slots }
    }

    pub fn channels(&self) -> usize {
        self.slots.len()
    }

    /// Abort handle of a channel's current trial.
    pub fn abort_handle(&self, channel: usize) -> Option<AbortSignal> {
        self.slots.get(channel).map(|s| s.abort.clone())
    }
}

impl TrialExecutor for LocalExecutor {
    fn execute(&mut self, batch: &[PlannedTrial], ctx: &ExecContext<'_>) -> Result<Vec<TrialRecord>, CampaignError> {
        let n = self.slots.len();
        if n == 0 {
            return Err(CampaignError::Execution("no channels".into()));
        }
        let mut results: Vec<Option<TrialRecord>> = vec![None; batch.len()];
        std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .slots
                .iter_mut()
                .enumerate()
                .map(|(c, slot)| {
                    scope.spawn(move || {
                        let rig = slot.rig.get_or_insert_with(|| {
                            let backend = SimBackend::new(ctx.model.clone(), ctx.device.clone(), 0);
                            let mut rig = ChannelRig::new(slot.id, backend);
                            if let Some(h) = slot.hooks.take() {
                                rig.set_sink(h.sink);
                            }
                            rig
                        });
                        let mut out = Vec::new();
                        for (i, trial) in batch.iter().enumerate().skip(c).step_by(n) {
                            (ctx.progress)(ProgressEvent::TrialStarted {
                                device_id: trial.device_id.clone(),
                                channel: slot.id,
                            });
                            let rec = execute_planned(
                                rig,
                                trial,
                                ctx.device,
                                ctx.protocol,
                                &slot.abort,
                                &slot.path,
                                slot.lines.as_deref(),
                            );
                            slot.abort.clear();
                            (ctx.progress)(ProgressEvent::TrialEnded {
                                device_id: rec.device_id.clone(),
                                channel: slot.id,
                                status: rec.status,
                                lifetime: rec.lifetime.lifetime,
                            });
                            out.push((i, rec));
                        }
                        out
                    })
                })
                .collect();
            for h in handles {
                match h.join() {
                    Ok(v) => v.into_iter().for_each(|(i, r)| results[i] = Some(r)),
                    Err(_) => return Err(CampaignError::Execution("channel worker panicked".into())),
                }
            }
            Ok(())
        })?;
        results
            .into_iter()
            .map(|r| r.ok_or_else(|| CampaignError::Execution("missing trial result".into())))
            .collect()
    }
}

pub struct CampaignOutcome {
    pub records: Vec<TrialRecord>,
    pub report: CampaignReport,
}

/// Model for a manifest: shipped calibration plus its overrides.
pub fn manifest_model(manifest: &Manifest) -> Result<DeviceModel, CampaignError> {
    let cal = Calibration::default()
        .with_overrides(&manifest.calibration)
        .map_err(|e| CampaignError::Manifest(e.to_string()))?;
    Ok(DeviceModel::new(cal))
}

struct Runner<'a> {
    manifest: &'a Manifest,
    exec: &'a mut dyn TrialExecutor,
    on_record: &'a mut dyn FnMut(&TrialRecord) -> Result<(), CampaignError>,
    progress: &'a (dyn Fn(ProgressEvent) + Sync),
    cancel: &'a AbortSignal,
    model: DeviceModel,
    protocol: Protocol,
    records: Vec<TrialRecord>,
}

impl Runner<'_> {
    fn run_stage(&mut self, stage: u8, plan: impl Fn(&[TrialRecord]) -> Vec<PlannedTrial>) -> Result<(), CampaignError> {
        let reps = self.manifest.space.replicates_per_cell;
        loop {
            if self.cancel.is_requested() {
                return Err(CampaignError::Cancelled);
            }
            let batch = plan(&self.records);
            if batch.is_empty() {
                return Ok(());
            }
            (self.progress)(ProgressEvent::StageStarted {
                stage,
                trials: batch.len(),
            });
            let before = summarize(&self.records, stage, reps);
            let ctx = ExecContext {
                model: &self.model,
                device: &self.manifest.device,
                protocol: &self.protocol,
                progress: self.progress,
            };
            let recs = self.exec.execute(&batch, &ctx)?;
            for r in &recs {
                (self.on_record)(r)?;
            }
            self.records.extend(recs);
            for s in summarize(&self.records, stage, reps) {
                let was_done = before
                    .iter()
                    .any(|b| b.cell.same(&s.cell) && b.status != CellStatus::Pending);
                if s.status != CellStatus::Pending && !was_done {
                    (self.progress)(ProgressEvent::CellCompleted {
                        stage,
                        cell: s.cell,
                        status: s.status,
                    });
                }
            }
        }
    }
}

/// Runs all three stages. `on_record` sees every record in plan order as soon
/// as its batch finishes; `cancel` is checked between batches.
pub fn run_campaign(
    manifest: &Manifest,
    exec: &mut dyn TrialExecutor,
    on_record: &mut dyn FnMut(&TrialRecord) -> Result<(), CampaignError>,
    progress: &(dyn Fn(ProgressEvent) + Sync),
    cancel: &AbortSignal,
) -> Result<CampaignOutcome, CampaignError> {
    manifest.validate()?;
    let mut r = Runner {
        manifest,
        exec,
        on_record,
        progress,
        cancel,
        model: manifest_model(manifest)?,
        protocol: manifest.effective_protocol(),
        records: Vec::new(),
    };
    let space = &manifest.space;
    let seed = manifest.seed;
    r.run_stage(1, |rs| plan_stage1(space, rs, seed))?;

    let reps = space.replicates_per_cell;
    let stage1 = summarize(&r.records, 1, reps);
    let boundary = match &manifest.boundary_frequencies {
        Some(f) => select_boundary_at(&stage1, manifest.floor, space.lifetime_cap, f)?,
        None => select_boundary(&stage1, manifest.floor, space.lifetime_cap)?,
    };
    progress(ProgressEvent::BoundarySelected {
        drives: boundary.drives.clone(),
    });
    r.run_stage(2, |rs| plan_stage2(&boundary, space, rs, seed))?;

    let selections = select_best_material(&summarize(&r.records, 2, reps), &boundary)?;
    progress(ProgressEvent::MaterialSelected {
        selections: selections.clone(),
    });
    r.run_stage(3, |rs| plan_stage3(&selections, space, rs, seed))?;

    let report = compile_report(manifest, &r.records)?;
    progress(ProgressEvent::CampaignFinished {
        trials: r.records.len(),
    });
    Ok(CampaignOutcome {
        records: r.records,
        report,
    })
}
