//! Per-channel measurement controller: mode switching with a motorized
//! stage, force-feedback clamping, HV isolation interlock and trial
//! acquisition, all against a [`HardwareAdapter`].

mod adapter;
mod channel;
mod sim;
mod telemetry;
mod trial;

pub use adapter::{AdapterError, DriveCommand, HardwareAdapter, RotaryPos};
pub use channel::{
    sweep_frequencies, ChannelMode, ChannelRig, ClampResult, EventKind, FaultReason, Interlock, ModeTarget,
    MotionStage, RigConfig, RigError, RigEvent,
};
pub use sim::{SimBackend, SimConfig, SimFaults};
pub use telemetry::{FnSink, NullSink, Paced, SharedSink, SinkError, Tee, TelemetrySample, TelemetrySink};
pub use trial::{AbortSignal, Protocol, TrialOutcome, TrialStatus};

/// Channel rig over the simulated instruments.
pub type SimRig = ChannelRig<SimBackend>;
