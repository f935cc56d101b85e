//! Simulation-backed lifetime testing for rolled linear dielectric elastomer
//! actuators.
//!
//! * [`devicemodel`]: calibrated synthetic actuator with seeded degradation
//! * [`waveform`]: square-wave and sweep drive with flip-flop switch timing
//! * [`rig`]: per-channel measurement state machine with interlocks
//! * [`analysis`]: cycle amplitudes, lifetime and capacitance reducers
//! * [`campaign`]: staged field/frequency and material scans
//! * [`gait`]: analytical locomotion-unit model (generic over [`Real`])
//! * [`store`]: append-only run directories

pub mod analysis;
pub mod calibration;
pub mod campaign;
pub mod devicemodel;
pub mod gait;
pub mod landscape;
pub mod rig;
pub mod scalar;
pub mod store;
pub mod waveform;

pub use scalar::Real;

pub type UnitGeometry = gait::UnitGeometry<f64>;
pub type ActuatorDrive = gait::ActuatorDrive<f64>;
pub type Pose = gait::Pose<f64>;
pub type BodyForces = gait::BodyForces<f64>;
