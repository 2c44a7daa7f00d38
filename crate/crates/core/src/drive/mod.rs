//! The control loop: pilots, actuation mapping, the fixed-rate scheduler, lap
//! evaluation and reference-data generation.

mod actuation;
mod collect;
mod handle;
mod lap;
mod pilot;
mod session;
mod world;

pub use actuation::{
    actuate, clamp_norm, pca9685_counts, pulse_to_steering, steering_to_pulse, throttle_to_drive,
    ActuationCommand, LoopConfig, MotorDirection,
};
pub use collect::{collect_reference_data, CollectConfig};
pub use handle::{Clock, DriveMode, LoopHandle, SystemClock, VirtualClock};
pub use lap::{eval_laps, LapReport};
pub use pilot::{
    CnnPilot, ConstantPilot, DriveCommand, NoisyPilot, Observation, Pilot, PilotOutput,
    PurePursuitPilot, TeleopPilot,
};
pub use session::{NullSink, Pose, Session, SessionSummary, TelemetrySink, TickReport};
pub use world::World;
