//! Analytical posture and internal-force model of a base locomotion unit, and
//! the three-step open-loop walking cycle.
//!
//! Angles are degrees at the API boundary and radians internally.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devicemodel::{DeviceModel, DeviceSpec, DeviceState};
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum GaitError {
    #[error("leg does not reach below the frame (delta_h = {0})")]
    Geometry(f64),
    #[error("degenerate contact geometry: {0}")]
    Degenerate(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// Frame and leg dimensions, mm; attachment angle in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitGeometry<T> {
    /// Frame height.
    pub h: T,
    /// Frame width.
    pub b: T,
    /// Leg length.
    pub l: T,
    /// Leg attachment angle, degrees.
    pub theta_l: T,
}

impl<T: Real> UnitGeometry<T> {
    pub fn validate(&self) -> Result<(), GaitError> {
        let zero = T::zero();
        if !(self.h > zero && self.b > zero && self.l > zero) {
            return Err(GaitError::Invalid("h, b and l must be positive".into()));
        }
        if !(self.theta_l > zero && self.theta_l < T::lit(90.0)) {
            return Err(GaitError::Invalid("theta_l must lie in (0, 90) degrees".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: T) -> Self {
        Self {
            h: self.h * k,
            b: self.b * k,
            l: self.l * k,
            theta_l: self.theta_l,
        }
    }
}

impl Default for UnitGeometry<f64> {
    fn default() -> Self {
        Self {
            h: 40.0,
            b: 40.0,
            l: 30.0,
            theta_l: 30.0,
        }
    }
}

/// Elongations (mm) and forces (N) of the three actuators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorDrive<T> {
    pub e: [T; 3],
    pub f: [T; 3],
}

impl<T: Real> ActuatorDrive<T> {
    pub fn neutral() -> Self {
        Self {
            e: [T::zero(); 3],
            f: [T::zero(); 3],
        }
    }

    pub fn elongations(e1: T, e2: T, e3: T) -> Self {
        Self {
            e: [e1, e2, e3],
            f: [T::zero(); 3],
        }
    }

    pub fn forces(f1: T, f2: T, f3: T) -> Self {
        Self {
            e: [T::zero(); 3],
            f: [f1, f2, f3],
        }
    }
}

/// Posture of the unit; lengths in mm, body tilt in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    pub h_c: T,
    pub w_c: T,
    pub delta_h: T,
    pub delta_l: T,
    pub delta_w: T,
    pub d: T,
    pub theta_b: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyForces<T> {
    pub f_x: T,
    pub f_y: T,
}

/// Vertical-force formula variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceMode {
    /// Second vertical term uses cos(theta_b) (default form).
    #[default]
    AsPrinted,
    /// Second vertical term uses sin(theta_b).
    Corrected,
}

pub fn pose<T: Real>(geom: &UnitGeometry<T>, drive: &ActuatorDrive<T>) -> Result<Pose<T>, GaitError> {
    let two = T::lit(2.0);
    let [e1, e2, e3] = drive.e;
    let theta_l = geom.theta_l.to_radians();
    let h_c = geom.h / two - e1 + e3;
    let w_c = geom.b / two + e2;
    let delta_h = geom.l * theta_l.cos() - h_c;
    if !(delta_h > T::zero()) {
        return Err(GaitError::Geometry(delta_h.to_f64_lossy()));
    }
    let delta_l = delta_h / theta_l.cos();
    let delta_w = w_c + (geom.l - delta_l) * theta_l.sin();
    let contact = (geom.theta_l + T::lit(90.0)).to_radians();
    let d2 = delta_l * delta_l + delta_w * delta_w - two * delta_l * delta_w * contact.cos();
    if !(d2 > T::zero()) {
        return Err(GaitError::Degenerate(format!("contact distance^2 = {:?}", d2)));
    }
    let d = d2.sqrt();
    let s = delta_l * contact.sin() / d;
    if !(s >= -T::one() && s <= T::one()) {
        return Err(GaitError::Degenerate(format!("arcsin argument {:?}", s)));
    }
    Ok(Pose {
        h_c,
        w_c,
        delta_h,
        delta_l,
        delta_w,
        d,
        theta_b: s.asin().to_degrees(),
    })
}

pub fn body_forces<T: Real>(pose: &Pose<T>, drive: &ActuatorDrive<T>, mode: ForceMode) -> BodyForces<T> {
    let [f1, f2, f3] = drive.f;
    let tb = pose.theta_b.to_radians();
    let (s, c) = tb.sin_cos();
    let axial = f3 - f1;
    let f_x = axial * s - f2 * c;
    let f_y = match mode {
        ForceMode::AsPrinted => axial * c - f2 * c,
        ForceMode::Corrected => axial * c - f2 * s,
    };
    BodyForces { f_x, f_y }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitPhase {
    /// Active actuators, 1-based.
    pub active: Vec<u8>,
    /// Fraction of the cycle.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitSchedule {
    pub phases: Vec<GaitPhase>,
    /// Inverse of one complete walking cycle, Hz.
    pub cycle_freq: f64,
}

/// Three-step cycle {1}, {1, 2}, {3} with equal phase lengths.
pub fn walk_cycle_schedule(cycle_freq: f64) -> Result<GaitSchedule, GaitError> {
    let third = 1.0 / 3.0;
    GaitSchedule::with_fractions(cycle_freq, [third, third, 1.0 - 2.0 * third])
}

impl GaitSchedule {
    pub fn with_fractions(cycle_freq: f64, fractions: [f64; 3]) -> Result<Self, GaitError> {
        if !(cycle_freq > 0.0) {
            return Err(GaitError::Invalid("cycle_freq must be > 0".into()));
        }
        if fractions.iter().any(|f| !(*f > 0.0)) {
            return Err(GaitError::Invalid("phase fractions must be > 0".into()));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GaitError::Invalid(format!("phase fractions sum to {sum}, not 1")));
        }
        let actives: [&[u8]; 3] = [&[1], &[1, 2], &[3]];
        Ok(Self {
            phases: actives
                .iter()
                .zip(fractions)
                .map(|(a, fraction)| GaitPhase {
                    active: a.to_vec(),
                    fraction,
                })
                .collect(),
            cycle_freq,
        })
    }

    pub fn period(&self) -> f64 {
        1.0 / self.cycle_freq
    }

    /// Start times of every phase after the first, s.
    pub fn phase_boundaries(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.phases[..self.phases.len() - 1]
            .iter()
            .map(|p| {
                acc += p.fraction;
                acc * self.period()
            })
            .collect()
    }
}

/// Pose and forces during one phase of the cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState<T> {
    pub unit: usize,
    pub phase: usize,
    /// Phase start, s.
    pub t: f64,
    pub active: Vec<u8>,
    pub drive: ActuatorDrive<T>,
    pub pose: Pose<T>,
    pub forces: BodyForces<T>,
}

/// Evaluates every phase of one cycle for each of `units` identical units.
/// Active actuators deliver the device model's maximum displacement and
/// blocked force at `field`.
pub fn simulate_cycle<T: Real>(
    model: &DeviceModel,
    geom: &UnitGeometry<T>,
    device: &DeviceSpec,
    field: f64,
    schedule: &GaitSchedule,
    units: usize,
    mode: ForceMode,
) -> Result<Vec<Vec<PhaseState<T>>>, GaitError> {
    geom.validate()?;
    if units == 0 {
        return Err(GaitError::Invalid("units must be >= 1".into()));
    }
    let fresh = DeviceState::fresh(0);
    let e = T::lit(model.displacement(device, &fresh, field));
    let f = T::lit(model.blocked_force(device, &fresh, field));
    let mut t = 0.0;
    let mut single = Vec::with_capacity(schedule.phases.len());
    for (i, phase) in schedule.phases.iter().enumerate() {
        let mut drive = ActuatorDrive::neutral();
        for &a in &phase.active {
            let k = usize::from(a)
                .checked_sub(1)
                .filter(|k| *k < 3)
                .ok_or_else(|| GaitError::Invalid(format!("actuator index {a}")))?;
            drive.e[k] = e;
            drive.f[k] = f;
        }
        let p = pose(geom, &drive)?;
        single.push(PhaseState {
            unit: 0,
            phase: i,
            t,
            active: phase.active.clone(),
            drive,
            pose: p,
            forces: body_forces(&p, &drive, mode),
        });
        t += phase.fraction * schedule.period();
    }
    Ok((0..units)
        .map(|u| single.iter().cloned().map(|s| PhaseState { unit: u, ..s }).collect())
        .collect())
}

/// File form of a gait evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaitConfig {
    pub geometry: UnitGeometry<f64>,
    pub cycle_freq: f64,
    pub fractions: [f64; 3],
    pub units: usize,
    /// V/µm
    pub field: f64,
    pub device: DeviceSpec,
    /// Elongations for a single `pose` evaluation, mm.
    pub elongations: [f64; 3],
    /// Forces for a single `pose` evaluation, N.
    pub forces: [f64; 3],
}

impl Default for GaitConfig {
    fn default() -> Self {
        let third = 1.0 / 3.0;
        Self {
            geometry: UnitGeometry::default(),
            cycle_freq: 1.0,
            fractions: [third, third, 1.0 - 2.0 * third],
            units: 1,
            field: 42.0,
            device: DeviceSpec::scaled(),
            elongations: [0.0; 3],
            forces: [0.0; 3],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn geom() -> UnitGeometry<f64> {
        UnitGeometry::default()
    }

    #[test]
    fn neutral_pose_identities() {
        let p = pose(&geom(), &ActuatorDrive::neutral()).unwrap();
        assert_eq!(p.h_c, 20.0);
        assert_eq!(p.w_c, 20.0);
    }

    #[test]
    fn numeric_chain_matches_hand_values() {
        // Hand evaluation: delta_h = 30 cos30 - 20 = 5.981, delta_l = 6.906,
        // delta_w = 20 + (30 - 6.906) sin30 = 31.547,
        // d = sqrt(6.906^2 + 31.547^2 + 2 * 6.906 * 31.547 * sin30) = 35.508,
        // theta_b = asin(6.906 cos30 / 35.508) = 9.697 deg.
        let p = pose(&geom(), &ActuatorDrive::neutral()).unwrap();
        assert_relative_eq!(p.delta_h, 5.98, max_relative = 0.005);
        assert_relative_eq!(p.delta_l, 6.91, max_relative = 0.005);
        assert_relative_eq!(p.delta_w, 31.55, max_relative = 0.005);
        assert_relative_eq!(p.d, 35.5, max_relative = 0.005);
        assert_relative_eq!(p.theta_b, 9.7, max_relative = 0.005);
    }

    #[test]
    fn e3_shifts_center_height() {
        let base = pose(&geom(), &ActuatorDrive::neutral()).unwrap();
        let p = pose(&geom(), &ActuatorDrive::elongations(0.0, 0.0, 1.5)).unwrap();
        assert_relative_eq!(base.h_c - p.h_c, -1.5, epsilon = 1e-12);
        let p = pose(&geom(), &ActuatorDrive::elongations(1.5, 0.0, 0.0)).unwrap();
        assert_relative_eq!(base.h_c - p.h_c, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn short_leg_is_geometry_error() {
        let g = UnitGeometry { l: 20.0, ..geom() };
        assert!(matches!(pose(&g, &ActuatorDrive::neutral()), Err(GaitError::Geometry(_))));
    }

    #[test]
    fn forces_at_zero_tilt() {
        let p = Pose {
            theta_b: 0.0,
            ..pose(&geom(), &ActuatorDrive::neutral()).unwrap()
        };
        let f = body_forces(&p, &ActuatorDrive::forces(1.0, 2.0, 3.0), ForceMode::AsPrinted);
        assert_eq!(f.f_x, -2.0);
        assert_eq!(f.f_y, 0.0);
    }

    #[test]
    fn forces_at_derived_tilt() {
        let p = Pose {
            theta_b: 9.7,
            ..pose(&geom(), &ActuatorDrive::neutral()).unwrap()
        };
        let d = ActuatorDrive::forces(0.0, 1.0, 0.0);
        let printed = body_forces(&p, &d, ForceMode::AsPrinted);
        let corrected = body_forces(&p, &d, ForceMode::Corrected);
        assert_relative_eq!(printed.f_x, -0.9857, epsilon = 1e-4);
        assert_relative_eq!(printed.f_y, -0.9857, epsilon = 1e-4);
        assert_relative_eq!(corrected.f_y, -0.1685, epsilon = 1e-4);
        assert_eq!(printed.f_x, corrected.f_x);
    }

    #[test]
    fn schedule_boundaries() {
        let s = walk_cycle_schedule(1.0).unwrap();
        let b = s.phase_boundaries();
        assert_relative_eq!(b[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(b[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(s.phases[0].active, vec![1]);
        assert_eq!(s.phases[1].active, vec![1, 2]);
        assert_eq!(s.phases[2].active, vec![3]);
        assert_relative_eq!(walk_cycle_schedule(6.0).unwrap().period(), 1.0 / 6.0);
        assert!(GaitSchedule::with_fractions(1.0, [0.5, 0.5, 0.5]).is_err());
        assert!(GaitSchedule::with_fractions(0.0, [0.2, 0.3, 0.5]).is_err());
    }

    #[test]
    fn zero_field_cycle_is_neutral() {
        let m = DeviceModel::default();
        let s = walk_cycle_schedule(1.0).unwrap();
        let neutral = pose(&geom(), &ActuatorDrive::neutral()).unwrap();
        let tr = simulate_cycle(&m, &geom(), &DeviceSpec::scaled(), 0.0, &s, 1, ForceMode::AsPrinted).unwrap();
        assert!(tr[0].iter().all(|p| p.pose == neutral));
    }

    #[test]
    fn propulsive_phase_pushes_backwards_on_the_body() {
        let m = DeviceModel::default();
        let s = walk_cycle_schedule(1.0).unwrap();
        let tr = simulate_cycle(&m, &geom(), &DeviceSpec::scaled(), 42.0, &s, 1, ForceMode::AsPrinted).unwrap();
        let p2 = &tr[0][1];
        // direct substitution: F_x = -F1 sin(theta_b) - F2 cos(theta_b)
        let tb = p2.pose.theta_b.to_radians();
        let oracle = -p2.drive.f[0] * tb.sin() - p2.drive.f[1] * tb.cos();
        assert_relative_eq!(p2.forces.f_x, oracle, epsilon = 1e-12);
        assert!(p2.forces.f_x < 0.0);
    }

    #[test]
    fn multi_unit_traces_are_identical() {
        let m = DeviceModel::default();
        let s = walk_cycle_schedule(6.0).unwrap();
        let tr = simulate_cycle(&m, &geom(), &DeviceSpec::scaled(), 42.0, &s, 4, ForceMode::AsPrinted).unwrap();
        assert_eq!(tr.len(), 4);
        for unit in &tr[1..] {
            for (a, b) in unit.iter().zip(&tr[0]) {
                assert_eq!(a.pose, b.pose);
                assert_eq!(a.forces, b.forces);
                assert_eq!(a.t, b.t);
            }
        }
    }

    #[test]
    fn single_precision_agrees() {
        let g32 = UnitGeometry::<f32> {
            h: 40.0,
            b: 40.0,
            l: 30.0,
            theta_l: 30.0,
        };
        let p32 = pose(&g32, &ActuatorDrive::neutral()).unwrap();
        let p64 = pose(&geom(), &ActuatorDrive::neutral()).unwrap();
        assert!((p32.theta_b as f64 - p64.theta_b).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn scale_covariance(k in 0.1f64..20.0, e1 in 0.0f64..2.0, e2 in 0.0f64..2.0, e3 in 0.0f64..2.0) {
            let g = geom();
            let d = ActuatorDrive::elongations(e1, e2, e3);
            let ds = ActuatorDrive::elongations(e1 * k, e2 * k, e3 * k);
            let p = pose(&g, &d).unwrap();
            let q = pose(&g.scaled(k), &ds).unwrap();
            for (a, b) in [(p.h_c, q.h_c), (p.w_c, q.w_c), (p.delta_h, q.delta_h), (p.delta_l, q.delta_l), (p.delta_w, q.delta_w), (p.d, q.d)] {
                prop_assert!((a * k - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
            prop_assert!((p.theta_b - q.theta_b).abs() <= 1e-9);
        }

        #[test]
        fn forces_are_linear(f1 in 0.0f64..3.0, f2 in 0.0f64..3.0, f3 in 0.0f64..3.0, a in 0.0f64..5.0, tb in 0.1f64..60.0) {
            let p = Pose { theta_b: tb, ..pose(&geom(), &ActuatorDrive::neutral()).unwrap() };
            for mode in [ForceMode::AsPrinted, ForceMode::Corrected] {
                let one = body_forces(&p, &ActuatorDrive::forces(f1, f2, f3), mode);
                let scaled = body_forces(&p, &ActuatorDrive::forces(a * f1, a * f2, a * f3), mode);
                prop_assert!((one.f_x * a - scaled.f_x).abs() < 1e-9);
                prop_assert!((one.f_y * a - scaled.f_y).abs() < 1e-9);
            }
            let no_f2 = ActuatorDrive::forces(f1, 0.0, f3);
            prop_assert_eq!(body_forces(&p, &no_f2, ForceMode::AsPrinted), body_forces(&p, &no_f2, ForceMode::Corrected));
            let sym = body_forces(&p, &ActuatorDrive::forces(f1, 0.0, f1), ForceMode::AsPrinted);
            prop_assert!(sym.f_x.abs() < 1e-12 && sym.f_y.abs() < 1e-12);
        }
    }
}
