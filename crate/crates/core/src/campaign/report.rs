use serde::{Deserialize, Serialize};

use super::{
    select_best_material, select_boundary, select_boundary_at, summarize, CampaignError, CellSummary, Manifest,
    MaterialSelection, TrialRecord,
};
use crate::devicemodel::{Drive, Filler, MaterialConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Best,
    Baseline,
    Worst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub role: Role,
    pub stage: u8,
    pub material: MaterialConfig,
    pub completed: usize,
    pub mean_lifetime: f64,
    pub std_lifetime: f64,
    pub mean_displacement: f64,
    pub std_displacement: f64,
}

impl ComparisonRow {
    fn from_summary(role: Role, s: &CellSummary) -> Self {
        Self {
            role,
            stage: s.stage,
            material: s.cell.material,
            completed: s.completed,
            mean_lifetime: s.mean_lifetime,
            std_lifetime: s.std_lifetime,
            mean_displacement: s.mean_displacement,
            std_displacement: s.std_displacement,
        }
    }
}

/// Best/baseline/worst at one boundary condition. "Worst" is the lowest
/// stage-2 lifetime at the same boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub drive: Drive,
    pub best: ComparisonRow,
    pub baseline: ComparisonRow,
    pub worst: ComparisonRow,
    pub lifetime_vs_baseline_pct: f64,
    pub lifetime_vs_worst_pct: f64,
    pub displacement_vs_baseline_pct: f64,
    pub displacement_vs_worst_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub trials: usize,
    pub stage1: Vec<CellSummary>,
    pub boundary: Vec<Drive>,
    pub stage2: Vec<CellSummary>,
    pub selections: Vec<MaterialSelection>,
    pub stage3: Vec<CellSummary>,
    pub comparisons: Vec<Comparison>,
}

/// Flat row of the CSV summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub field: f64,
    pub freq: f64,
    pub role: Role,
    pub stage: u8,
    pub filler: Filler,
    pub cnt_conc: f64,
    pub completed: usize,
    pub mean_lifetime_s: f64,
    pub std_lifetime_s: f64,
    pub mean_displacement_mm: f64,
    pub std_displacement_mm: f64,
    /// Lifetime change of this row relative to baseline, %.
    pub lifetime_vs_baseline_pct: f64,
    /// Lifetime gain of the best row over this row, %.
    pub best_vs_this_pct: f64,
}

pub(crate) fn pct(a: f64, b: f64) -> f64 {
    (a - b) / b * 100.0
}

impl CampaignReport {
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.comparisons
            .iter()
            .flat_map(|c| {
                [&c.best, &c.baseline, &c.worst].map(|r| SummaryRow {
                    field: c.drive.field,
                    freq: c.drive.frequency,
                    role: r.role,
                    stage: r.stage,
                    filler: r.material.filler,
                    cnt_conc: r.material.cnt_conc,
                    completed: r.completed,
                    mean_lifetime_s: r.mean_lifetime,
                    std_lifetime_s: r.std_lifetime,
                    mean_displacement_mm: r.mean_displacement,
                    std_displacement_mm: r.std_displacement,
                    lifetime_vs_baseline_pct: pct(r.mean_lifetime, c.baseline.mean_lifetime),
                    best_vs_this_pct: pct(c.best.mean_lifetime, r.mean_lifetime),
                })
            })
            .collect()
    }
}

fn comparison(drive: Drive, stage2: &[CellSummary], stage3: &[CellSummary]) -> Option<Comparison> {
    let at = |s: &&CellSummary| s.cell.field == drive.field && s.cell.freq == drive.frequency && s.completed > 0;
    let s2: Vec<&CellSummary> = stage2.iter().filter(at).collect();
    let baseline = s2.iter().find(|s| s.cell.material.is_baseline())?;
    let best = s2
        .iter()
        .copied()
        .chain(stage3.iter().filter(at))
        .min_by(|a, b| b.mean_lifetime.total_cmp(&a.mean_lifetime).then(a.cell.cmp_order(&b.cell)))?;
    let worst = s2
        .iter()
        .min_by(|a, b| a.mean_lifetime.total_cmp(&b.mean_lifetime).then(a.cell.cmp_order(&b.cell)))?;
    Some(Comparison {
        drive,
        lifetime_vs_baseline_pct: pct(best.mean_lifetime, baseline.mean_lifetime),
        lifetime_vs_worst_pct: pct(best.mean_lifetime, worst.mean_lifetime),
        displacement_vs_baseline_pct: pct(best.mean_displacement, baseline.mean_displacement),
        displacement_vs_worst_pct: pct(best.mean_displacement, worst.mean_displacement),
        best: ComparisonRow::from_summary(Role::Best, best),
        baseline: ComparisonRow::from_summary(Role::Baseline, baseline),
        worst: ComparisonRow::from_summary(Role::Worst, worst),
    })
}

/// Rebuilds the whole report from raw trial records. Later stages that have
/// no records yet are left empty.
pub fn compile_report(manifest: &Manifest, records: &[TrialRecord]) -> Result<CampaignReport, CampaignError> {
    if records.is_empty() {
        return Err(CampaignError::NoTrials);
    }
    let reps = manifest.space.replicates_per_cell;
    let cap = manifest.space.lifetime_cap;
    let stage1 = summarize(records, 1, reps);
    let stage2 = summarize(records, 2, reps);
    let stage3 = summarize(records, 3, reps);
    let boundary = match &manifest.boundary_frequencies {
        Some(f) => select_boundary_at(&stage1, manifest.floor, cap, f),
        None => select_boundary(&stage1, manifest.floor, cap),
    }
    .map(|b| b.drives)
    .unwrap_or_default();
    let bc = super::BoundaryConditions { drives: boundary.clone() };
    let selections = if stage2.is_empty() {
        Vec::new()
    } else {
        select_best_material(&stage2, &bc).unwrap_or_default()
    };
    let comparisons = boundary
        .iter()
        .filter_map(|&d| comparison(d, &stage2, &stage3))
        .collect();
    Ok(CampaignReport {
        schema_version: REPORT_SCHEMA_VERSION,
        name: manifest.name.clone(),
        seed: manifest.seed,
        trials: records.len(),
        stage1,
        boundary,
        stage2,
        selections,
        stage3,
        comparisons,
    })
}
