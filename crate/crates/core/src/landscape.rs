//! Cycle-level replicate simulation: runs the device model directly (no rig,
//! no telemetry) and applies the lifetime reducer to the per-period
//! amplitudes. Used to survey the field/frequency landscape quickly.

use serde::{Deserialize, Serialize};

use crate::analysis::{AnalysisError, CycleAmplitude, LifetimeParams, LifetimeResult, LifetimeTracker};
use crate::devicemodel::{DeviceModel, DeviceSpec, DeviceState, Drive};
use crate::waveform::WaveformSpec;

/// Default degradation step, s.
pub const DEFAULT_TICK: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub seed: u64,
    pub lifetime: LifetimeResult,
    /// Mean cycle amplitude up to the lifetime, mm.
    pub avg_displacement: f64,
    /// Time the device broke down, if it did.
    pub hard_failure_t: Option<f64>,
    pub final_state: DeviceState,
}

/// Simulates one device under a square-wave drive until its lifetime is
/// decided or the cap is reached.
pub fn simulate_replicate(
    model: &DeviceModel,
    spec: &DeviceSpec,
    drive: &Drive,
    seed: u64,
    params: &LifetimeParams,
    tick: f64,
) -> Result<ReplicateOutcome, AnalysisError> {
    let wave = WaveformSpec::dc_square(drive.field, drive.frequency, params.cap);
    let tau = model.time_constant(spec);
    let period = 1.0 / drive.frequency;
    let peak_frac = wave.charge_fraction(0.5 * period, tau).unwrap_or(1.0);
    let trough_frac = wave.charge_fraction(0.0, tau).unwrap_or(0.0);

    let mut state = DeviceState::fresh(seed);
    let mut next_tick = tick;
    let mut tracker = LifetimeTracker::new(params.clone());
    let mut hard_failure_t = None;
    let mut k: u64 = 0;
    loop {
        let t_end = (k + 1) as f64 * period;
        if t_end > params.cap + 1e-9 {
            break;
        }
        let t_mid = (k as f64 + 0.5) * period;
        while next_tick <= t_mid + 1e-12 {
            state = model.step_degradation(spec, &state, drive, tick);
            if state.failed {
                hard_failure_t = Some(next_tick);
                break;
            }
            next_tick += tick;
        }
        if hard_failure_t.is_some() {
            break;
        }
        let amp = model.displacement(spec, &state, drive.field * peak_frac)
            - model.displacement(spec, &state, drive.field * trough_frac);
        if tracker.push(CycleAmplitude { t: t_mid, amplitude: amp }).is_some() {
            break;
        }
        k += 1;
    }
    let lifetime = tracker.finish(hard_failure_t)?;
    let avg_displacement = crate::analysis::average_displacement(tracker.cycles(), lifetime.lifetime).unwrap_or(0.0);
    Ok(ReplicateOutcome {
        seed,
        lifetime,
        avg_displacement,
        hard_failure_t,
        final_state: state,
    })
}

/// Summary over replicates of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSurvey {
    pub drive: Drive,
    pub mean_lifetime: f64,
    pub censored_fraction: f64,
    pub mean_displacement: f64,
    pub replicates: usize,
}

/// Runs `seeds` replicates of one drive and summarizes them.
pub fn survey_cell(
    model: &DeviceModel,
    spec: &DeviceSpec,
    drive: &Drive,
    seeds: impl IntoIterator<Item = u64>,
    params: &LifetimeParams,
) -> Result<CellSurvey, AnalysisError> {
    let outcomes = seeds
        .into_iter()
        .map(|s| simulate_replicate(model, spec, drive, s, params, DEFAULT_TICK))
        .collect::<Result<Vec<_>, _>>()?;
    let n = outcomes.len().max(1) as f64;
    Ok(CellSurvey {
        drive: *drive,
        mean_lifetime: outcomes.iter().map(|o| o.lifetime.lifetime).sum::<f64>() / n,
        censored_fraction: outcomes.iter().filter(|o| o.lifetime.censored).count() as f64 / n,
        mean_displacement: outcomes.iter().map(|o| o.avg_displacement).sum::<f64>() / n,
        replicates: outcomes.len(),
    })
}
