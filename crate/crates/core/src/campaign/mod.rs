//! Staged optimization pipeline: stage-1 field x frequency scan with early
//! stop, boundary selection, stage-2 single-factor material scans, stage-3
//! combined confirmation and best/baseline/worst reporting.
//!
//! Planners are pure functions of the parameter space and the records seen
//! so far.

mod report;
mod run;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::LifetimeResult;
use crate::devicemodel::{DeviceSpec, Drive, Filler, MaterialConfig, BASELINE_CNT};
use crate::rig::{Protocol, TrialStatus};

pub use report::{compile_report, CampaignReport, Comparison, ComparisonRow, Role, REPORT_SCHEMA_VERSION};
pub use run::{
    execute_planned, manifest_model, run_campaign, CampaignOutcome, ChannelHooks, ExecContext, LocalExecutor, ProgressEvent,
    TrialExecutor,
};

/// Number of replicates after which an all-censored stage-1 cell stops.
pub const EARLY_STOP_REPLICATES: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum CampaignError {
    #[error("invalid parameter space: {0}")]
    InvalidSpace(String),
    #[error("no boundary candidate at {freq} Hz")]
    NoCandidate { freq: f64 },
    #[error("no trials")]
    NoTrials,
    #[error("missing results for {0}")]
    MissingCell(String),
    #[error("trial execution failed: {0}")]
    Execution(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("cancelled")]
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamSpace {
    /// V/µm
    pub fields: Vec<f64>,
    /// Hz
    pub frequencies: Vec<f64>,
    pub fillers: Vec<Filler>,
    /// mL/FA
    pub cnt_concs: Vec<f64>,
    pub replicates_per_cell: usize,
    /// s
    pub lifetime_cap: f64,
}

impl Default for ParamSpace {
    fn default() -> Self {
        Self {
            fields: vec![35.0, 40.0, 45.0, 50.0],
            frequencies: vec![1.0, 5.0, 10.0, 50.0],
            fillers: vec![Filler::LM, Filler::CB, Filler::CG],
            cnt_concs: vec![1.8, 2.2, 2.5, 2.9, 3.3],
            replicates_per_cell: 5,
            lifetime_cap: 10_800.0,
        }
    }
}

impl ParamSpace {
    pub fn validate(&self) -> Result<(), CampaignError> {
        if self.fields.is_empty() || self.frequencies.is_empty() || self.fillers.is_empty() || self.cnt_concs.is_empty()
        {
            return Err(CampaignError::InvalidSpace("lists must be non-empty".into()));
        }
        if self.replicates_per_cell == 0 {
            return Err(CampaignError::InvalidSpace("replicates_per_cell must be >= 1".into()));
        }
        if !(self.lifetime_cap > 0.0) {
            return Err(CampaignError::InvalidSpace("lifetime_cap must be > 0".into()));
        }
        if self.fields.iter().any(|&e| !(e > 0.0)) || self.frequencies.iter().any(|&f| !(f > 0.0)) {
            return Err(CampaignError::InvalidSpace("fields and frequencies must be > 0".into()));
        }
        for &c in &self.cnt_concs {
            MaterialConfig::new(Filler::CB, c).map_err(|e| CampaignError::InvalidSpace(e.to_string()))?;
        }
        Ok(())
    }
}

/// One (field, frequency, material) combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// V/µm
    pub field: f64,
    /// Hz
    pub freq: f64,
    pub material: MaterialConfig,
}

impl Cell {
    pub fn new(drive: Drive, material: MaterialConfig) -> Self {
        Self {
            field: drive.field,
            freq: drive.frequency,
            material,
        }
    }

    pub fn drive(&self) -> Drive {
        Drive::new(self.field, self.freq)
    }

    /// Stable textual key, e.g. `e40-f1-CB2.5`.
    pub fn key(&self) -> String {
        format!("e{}-f{}-{}{}", self.field, self.freq, self.material.filler, self.material.cnt_conc)
    }

    fn sort_key(&self) -> (f64, f64, Filler, f64) {
        (self.field, self.freq, self.material.filler, self.material.cnt_conc)
    }

    pub(crate) fn cmp_order(&self, other: &Self) -> std::cmp::Ordering {
        let (a, b) = (self.sort_key(), other.sort_key());
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.total_cmp(&b.3))
    }

    pub(crate) fn same(&self, other: &Self) -> bool {
        self.cmp_order(other).is_eq()
    }
}

/// A trial the scheduler intends to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedTrial {
    pub stage: u8,
    pub cell: Cell,
    pub replicate: u32,
    pub device_id: String,
    pub seed: u64,
}

impl PlannedTrial {
    pub fn new(campaign_seed: u64, stage: u8, cell: Cell, replicate: u32) -> Self {
        let device_id = format!("s{stage}-{}-r{replicate}", cell.key());
        let seed = derive_seed(campaign_seed, &device_id);
        Self {
            stage,
            cell,
            replicate,
            device_id,
            seed,
        }
    }
}

/// Device seed from the campaign seed and the device id (splitmix64 over
/// FNV-1a).
pub fn derive_seed(campaign_seed: u64, device_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in device_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ campaign_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One completed (or abandoned) trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub stage: u8,
    pub cell: Cell,
    pub replicate: u32,
    pub device_id: String,
    pub seed: u64,
    pub channel: u32,
    pub status: TrialStatus,
    pub lifetime: LifetimeResult,
    /// mm
    pub avg_displacement: Option<f64>,
    pub capacitance_loss: Option<f64>,
    /// Actuation time, s.
    pub duration: f64,
    /// `telemetry/ch<N>.jsonl#L<a>-L<b>` within the run directory.
    pub telemetry_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Pending,
    Complete,
    /// Stopped early: every one of the first replicates ran to the cap.
    Stable,
}

/// Per-cell aggregate over completed trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub stage: u8,
    pub cell: Cell,
    pub completed: usize,
    pub mean_lifetime: f64,
    pub std_lifetime: f64,
    pub mean_displacement: f64,
    pub std_displacement: f64,
    pub censored_fraction: f64,
    pub status: CellStatus,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups records of one stage by cell, in cell order.
fn by_cell<'a>(records: &'a [TrialRecord], stage: u8) -> Vec<(Cell, Vec<&'a TrialRecord>)> {
    let mut groups: Vec<(Cell, Vec<&TrialRecord>)> = Vec::new();
    let mut sorted: Vec<&TrialRecord> = records.iter().filter(|r| r.stage == stage).collect();
    sorted.sort_by(|a, b| a.cell.cmp_order(&b.cell).then(a.device_id.cmp(&b.device_id)));
    for r in sorted {
        match groups.last_mut() {
            Some((c, v)) if c.same(&r.cell) => v.push(r),
            _ => groups.push((r.cell, vec![r])),
        }
    }
    groups
}

fn is_stable(done: &[&TrialRecord]) -> bool {
    let complete: Vec<_> = done.iter().filter(|r| r.status == TrialStatus::Complete).collect();
    complete.len() >= EARLY_STOP_REPLICATES && complete.iter().all(|r| r.lifetime.censored)
}

/// Summaries of every cell of `stage` that has records. Only Complete
/// trials enter the statistics.
pub fn summarize(records: &[TrialRecord], stage: u8, replicates: usize) -> Vec<CellSummary> {
    by_cell(records, stage)
        .into_iter()
        .map(|(cell, rs)| {
            let done: Vec<&TrialRecord> = rs.iter().copied().filter(|r| r.status == TrialStatus::Complete).collect();
            let lifetimes: Vec<f64> = done.iter().map(|r| r.lifetime.lifetime).collect();
            let disps: Vec<f64> = done.iter().filter_map(|r| r.avg_displacement).collect();
            let (mean_lifetime, std_lifetime) = mean_std(&lifetimes);
            let (mean_displacement, std_displacement) = mean_std(&disps);
            let censored = done.iter().filter(|r| r.lifetime.censored).count();
            let status = if stage == 1 && replicates > EARLY_STOP_REPLICATES && is_stable(&rs) {
                CellStatus::Stable
            } else if done.len() >= replicates {
                CellStatus::Complete
            } else {
                CellStatus::Pending
            };
            CellSummary {
                stage,
                cell,
                completed: done.len(),
                mean_lifetime,
                std_lifetime,
                mean_displacement,
                std_displacement,
                censored_fraction: if done.is_empty() { 0.0 } else { censored as f64 / done.len() as f64 },
                status,
            }
        })
        .collect()
}

/// Trials still needed so each cell reaches `target(cell, records)`
/// completed replicates. Replicate numbers continue after the highest one
/// already attempted; a cell is abandoned after twice its target attempts.
fn top_up(
    campaign_seed: u64,
    stage: u8,
    cells: &[Cell],
    records: &[TrialRecord],
    target: impl Fn(&[&TrialRecord]) -> usize,
) -> Vec<PlannedTrial> {
    let mut out = Vec::new();
    for cell in cells {
        let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.stage == stage && r.cell.same(cell)).collect();
        let want = target(&rs);
        let completed = rs.iter().filter(|r| r.status == TrialStatus::Complete).count();
        if completed >= want || rs.len() >= 2 * want {
            continue;
        }
        let next = rs.iter().map(|r| r.replicate + 1).max().unwrap_or(0);
        let missing = (want - completed).min(2 * want - rs.len());
        out.extend((0..missing as u32).map(|i| PlannedTrial::new(campaign_seed, stage, *cell, next + i)));
    }
    out
}

/// Next batch of stage-1 trials at baseline materials.
///
/// The first batch runs `min(3, replicates)` per cell. A cell whose first
/// three completed replicates are all censored is Stable; the others are
/// topped up to `replicates`.
pub fn plan_stage1(space: &ParamSpace, prior: &[TrialRecord], campaign_seed: u64) -> Vec<PlannedTrial> {
    let cells: Vec<Cell> = space
        .fields
        .iter()
        .flat_map(|&e| {
            space
                .frequencies
                .iter()
                .map(move |&f| Cell::new(Drive::new(e, f), MaterialConfig::baseline()))
        })
        .collect();
    let reps = space.replicates_per_cell;
    let first = reps.min(EARLY_STOP_REPLICATES);
    top_up(campaign_seed, 1, &cells, prior, |rs| {
        let completed = rs.iter().filter(|r| r.status == TrialStatus::Complete).count();
        if completed < first {
            first
        } else if is_stable(rs) {
            first
        } else {
            reps
        }
    })
}

/// Chosen (field, frequency) operating points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub drives: Vec<Drive>,
}

/// Picks, for the lowest and highest tested frequency, the cell with the
/// largest mean displacement among those with `floor <= mean lifetime < cap`.
/// Ties go to the lower field.
pub fn select_boundary(summaries: &[CellSummary], floor: f64, cap: f64) -> Result<BoundaryConditions, CampaignError> {
    let mut freqs: Vec<f64> = summaries.iter().map(|s| s.cell.freq).collect();
    freqs.sort_by(f64::total_cmp);
    freqs.dedup();
    let (Some(&lo), Some(&hi)) = (freqs.first(), freqs.last()) else {
        return Err(CampaignError::NoTrials);
    };
    let targets = if lo == hi { vec![lo] } else { vec![lo, hi] };
    select_boundary_at(summaries, floor, cap, &targets)
}

/// [`select_boundary`] over an explicit frequency set.
pub fn select_boundary_at(
    summaries: &[CellSummary],
    floor: f64,
    cap: f64,
    freqs: &[f64],
) -> Result<BoundaryConditions, CampaignError> {
    let mut drives = Vec::new();
    for &freq in freqs {
        let best = summaries
            .iter()
            .filter(|s| s.cell.freq == freq && s.mean_lifetime < cap && s.mean_lifetime >= floor)
            .min_by(|a, b| {
                b.mean_displacement
                    .total_cmp(&a.mean_displacement)
                    .then(a.cell.field.total_cmp(&b.cell.field))
            })
            .ok_or(CampaignError::NoCandidate { freq })?;
        drives.push(best.cell.drive());
    }
    Ok(BoundaryConditions { drives })
}

/// Stage-2 cells at one boundary: the filler scan at baseline CNT followed
/// by the CNT scan with the baseline filler, baseline cell once.
pub fn stage2_cells(drive: Drive, space: &ParamSpace) -> Vec<Cell> {
    let mut cells: Vec<Cell> = space
        .fillers
        .iter()
        .map(|&f| Cell::new(drive, MaterialConfig { filler: f, cnt_conc: BASELINE_CNT }))
        .collect();
    for &c in &space.cnt_concs {
        let cell = Cell::new(drive, MaterialConfig { filler: Filler::CB, cnt_conc: c });
        if !cells.iter().any(|x| x.same(&cell)) {
            cells.push(cell);
        }
    }
    cells
}

/// Remaining stage-2 trials.
pub fn plan_stage2(
    boundary: &BoundaryConditions,
    space: &ParamSpace,
    prior: &[TrialRecord],
    campaign_seed: u64,
) -> Vec<PlannedTrial> {
    let cells: Vec<Cell> = boundary.drives.iter().flat_map(|&d| stage2_cells(d, space)).collect();
    let reps = space.replicates_per_cell;
    top_up(campaign_seed, 2, &cells, prior, |_| reps)
}

/// Per-boundary material choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialSelection {
    pub drive: Drive,
    pub lifetime_best: MaterialConfig,
    pub displacement_best: MaterialConfig,
    /// Combination of the differing factor levels, when the two bests differ
    /// and the combination is new.
    pub stage3: Option<MaterialConfig>,
}

/// Best material by lifetime and by displacement at each boundary, from
/// stage-2 summaries.
pub fn select_best_material(
    stage2: &[CellSummary],
    boundary: &BoundaryConditions,
) -> Result<Vec<MaterialSelection>, CampaignError> {
    boundary
        .drives
        .iter()
        .map(|&drive| {
            let at: Vec<&CellSummary> = stage2
                .iter()
                .filter(|s| s.cell.field == drive.field && s.cell.freq == drive.frequency && s.completed > 0)
                .collect();
            let argmax = |key: fn(&CellSummary) -> f64| {
                at.iter()
                    .copied()
                    .min_by(|a, b| key(b).total_cmp(&key(a)).then(a.cell.cmp_order(&b.cell)))
                    .map(|s| s.cell.material)
            };
            let missing = || CampaignError::MissingCell(format!("stage 2 at {} V/um, {} Hz", drive.field, drive.frequency));
            let lifetime_best = argmax(|s| s.mean_lifetime).ok_or_else(missing)?;
            let displacement_best = argmax(|s| s.mean_displacement).ok_or_else(missing)?;
            Ok(MaterialSelection {
                drive,
                lifetime_best,
                displacement_best,
                stage3: combine(lifetime_best, displacement_best),
            })
        })
        .collect()
}

/// Union of the factor levels that differ from baseline in two single-factor
/// winners.
pub fn combine(a: MaterialConfig, b: MaterialConfig) -> Option<MaterialConfig> {
    if a == b {
        return None;
    }
    let base = MaterialConfig::baseline();
    let filler = if a.filler != base.filler { a.filler } else { b.filler };
    let cnt_conc = if a.cnt_conc != base.cnt_conc { a.cnt_conc } else { b.cnt_conc };
    let m = MaterialConfig { filler, cnt_conc };
    (m != a && m != b).then_some(m)
}

/// Remaining stage-3 trials for the combination candidates.
pub fn plan_stage3(
    selections: &[MaterialSelection],
    space: &ParamSpace,
    prior: &[TrialRecord],
    campaign_seed: u64,
) -> Vec<PlannedTrial> {
    let cells: Vec<Cell> = selections
        .iter()
        .filter_map(|s| s.stage3.map(|m| Cell::new(s.drive, m)))
        .collect();
    let reps = space.replicates_per_cell;
    top_up(campaign_seed, 3, &cells, prior, |_| reps)
}

/// Campaign description shared by the CLI and the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub space: ParamSpace,
    pub protocol: Protocol,
    /// Parallel rig channels.
    pub channels: u32,
    /// Device geometry; the material is set per cell.
    pub device: DeviceSpec,
    /// Minimum practical lifetime for boundary selection, s.
    pub floor: f64,
    /// Frequencies at which boundaries are chosen; lowest and highest tested
    /// when absent.
    pub boundary_frequencies: Option<Vec<f64>>,
    /// Calibration keys overridden for this campaign.
    pub calibration: BTreeMap<String, serde_json::Value>,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

impl Default for Manifest {
    fn default() -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            name: "campaign".into(),
            seed: 0,
            space: ParamSpace::default(),
            protocol: Protocol::default(),
            channels: 2,
            device: DeviceSpec::test_sample(),
            floor: 1500.0,
            boundary_frequencies: None,
            calibration: BTreeMap::new(),
        }
    }
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self, CampaignError> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| CampaignError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(CampaignError::Manifest(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        if self.channels == 0 {
            return Err(CampaignError::Manifest("channels must be >= 1".into()));
        }
        self.space.validate()?;
        self.device.validate().map_err(|e| CampaignError::Manifest(e.to_string()))?;
        self.protocol
            .lifetime
            .validate()
            .map_err(|e| CampaignError::Manifest(e.to_string()))?;
        Ok(())
    }

    /// Protocol with the lifetime cap taken from the parameter space.
    pub fn effective_protocol(&self) -> Protocol {
        let mut p = self.protocol.clone();
        p.lifetime.cap = self.space.lifetime_cap;
        p
    }
}

#[cfg(test)]
mod tests;
