//! Live telemetry and teleop control over WebSocket.
//!
//! The control loop publishes through [`TelemetryPublisher`], which never blocks:
//! messages go into a bounded broadcast ring and slow clients skip ahead. Control
//! messages from clients land in the loop's [`LoopHandle`] mailbox.
//!
//! [`LoopHandle`]: pilotstack_core::drive::LoopHandle

mod messages;
mod publisher;
mod replay;
mod server;

pub use messages::{
    handle_control, ControlMessage, DriveValues, LapMsg, PoseMsg, Reply, TelemetryMessage,
};
pub use publisher::{encode_jpeg_b64, FrameGate, TelemetryHub, TelemetryPublisher};
pub use replay::{replay_tub, ReplaySummary};
pub use server::{router, spawn_service, ServiceConfig, ServiceHandle, ServiceState};

/// Environment variable overriding the bind address.
pub const BIND_ENV: &str = "PILOTSTACK_BIND";
/// Environment variable holding the optional access token.
pub const TOKEN_ENV: &str = "PILOTSTACK_TOKEN";
pub const DEFAULT_BIND: &str = "127.0.0.1:8887";
