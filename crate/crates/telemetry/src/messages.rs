use pilotstack_core::dataset::{DriveRecord, RecordMode};
use pilotstack_core::drive::{DriveCommand, DriveMode, LoopHandle, TickReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMsg {
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LapMsg {
    pub progress_m: f64,
    pub lateral_offset_m: f64,
}

/// One state update sent to every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename = "telemetry")]
pub struct TelemetryMessage {
    pub tick: u64,
    /// Milliseconds since session start.
    pub timestamp_ms: u64,
    pub mode: DriveMode,
    pub speed_mps: f64,
    pub steering_norm: f64,
    pub throttle_norm: f64,
    pub motor_duty: f64,
    pub servo_pulse_us: f64,
    pub pose: PoseMsg,
    pub lap: LapMsg,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_jpeg_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TelemetryMessage {
    pub fn from_report(r: &TickReport, frame_jpeg_b64: Option<String>) -> Self {
        Self {
            tick: r.tick,
            timestamp_ms: (r.sim_time_s * 1000.0).round() as u64,
            mode: r.mode,
            speed_mps: r.speed_mps,
            steering_norm: r.command.steering_norm,
            throttle_norm: r.command.throttle_norm,
            motor_duty: r.actuation.motor_duty,
            servo_pulse_us: r.actuation.servo_pulse_us,
            pose: PoseMsg {
                x_m: r.pose.x_m,
                y_m: r.pose.y_m,
                heading_rad: r.pose.heading_rad,
            },
            lap: LapMsg {
                progress_m: r.progress_m,
                lateral_offset_m: r.lateral_offset_m,
            },
            frame_jpeg_b64,
            error: r.error.clone(),
        }
    }

    /// Rebuilds a message from a logged record; duty and pulse use `cfg`'s mapping.
    pub fn from_record(
        r: &DriveRecord,
        cfg: &pilotstack_core::drive::LoopConfig,
        frame_jpeg_b64: Option<String>,
    ) -> Self {
        let act = pilotstack_core::drive::actuate(r.steering_norm, r.throttle_norm, cfg);
        let pose = r.pose.map_or(
            PoseMsg {
                x_m: 0.0,
                y_m: 0.0,
                heading_rad: 0.0,
            },
            |p| PoseMsg {
                x_m: p.x_m,
                y_m: p.y_m,
                heading_rad: p.heading_rad,
            },
        );
        let lap = r.lap.map_or(
            LapMsg {
                progress_m: 0.0,
                lateral_offset_m: 0.0,
            },
            |l| LapMsg {
                progress_m: l.progress_m,
                lateral_offset_m: l.lateral_offset_m,
            },
        );
        Self {
            tick: r.index as u64,
            timestamp_ms: r.timestamp_ms,
            mode: match r.mode {
                RecordMode::Manual => DriveMode::ManualRecord,
                RecordMode::Autopilot => DriveMode::Autopilot,
            },
            speed_mps: r.speed_mps,
            steering_norm: r.steering_norm,
            throttle_norm: r.throttle_norm,
            motor_duty: act.motor_duty,
            servo_pulse_us: act.servo_pulse_us,
            pose,
            lap,
            frame_jpeg_b64,
            error: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveValues {
    pub steering_norm: f64,
    pub throttle_norm: f64,
}

/// Client-to-server messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlMessage {
    Drive { drive: DriveValues },
    Mode { mode: DriveMode },
    Stop,
}

/// Server replies to control messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Reply {
    Ack {
        command: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        drive: Option<DriveValues>,
        #[serde(default)]
        clamped: bool,
        mode: DriveMode,
    },
    Error {
        message: String,
    },
}

impl Reply {
    pub fn error(message: impl Into<String>) -> Self {
        Reply::Error {
            message: message.into(),
        }
    }
}

/// Applies a control message to the loop: `drive` fills the teleop mailbox
/// (clamped), `mode` switches the drive mode, `stop` safe-stops into manual.
pub fn handle_control(msg: &ControlMessage, handle: &LoopHandle) -> Reply {
    match msg {
        ControlMessage::Drive { drive } => {
            let (applied, clamped) =
                handle.submit_drive(DriveCommand::new(drive.steering_norm, drive.throttle_norm));
            Reply::Ack {
                command: "drive".into(),
                drive: Some(DriveValues {
                    steering_norm: applied.steering_norm,
                    throttle_norm: applied.throttle_norm,
                }),
                clamped,
                mode: handle.mode(),
            }
        }
        ControlMessage::Mode { mode } => {
            handle.set_mode(*mode);
            Reply::Ack {
                command: "mode".into(),
                drive: None,
                clamped: false,
                mode: *mode,
            }
        }
        ControlMessage::Stop => {
            handle.emergency_stop();
            Reply::Ack {
                command: "stop".into(),
                drive: None,
                clamped: false,
                mode: handle.mode(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pilotstack_core::drive::VirtualClock;
    use std::sync::Arc;

    #[test]
    fn parses_control_messages() {
        let m: ControlMessage = serde_json::from_str(r#"{"type":"mode","mode":"autopilot"}"#).unwrap();
        assert_eq!(m, ControlMessage::Mode { mode: DriveMode::Autopilot });
        let m: ControlMessage = serde_json::from_str(r#"{"type":"stop"}"#).unwrap();
        assert_eq!(m, ControlMessage::Stop);
        assert!(serde_json::from_str::<ControlMessage>(r#"{"type":"reverse"}"#).is_err());
        assert!(serde_json::from_str::<ControlMessage>(r#"{"type":"mode","mode":"warp"}"#).is_err());
    }

    #[test]
    fn drive_is_clamped_and_acknowledged() {
        let h = LoopHandle::new(Arc::new(VirtualClock::new()), DriveMode::Manual);
        let m: ControlMessage =
            serde_json::from_str(r#"{"type":"drive","drive":{"steering_norm":2.0,"throttle_norm":0.3}}"#).unwrap();
        match handle_control(&m, &h) {
            Reply::Ack { drive: Some(d), clamped, .. } => {
                assert!(clamped);
                assert_eq!(d.steering_norm, 1.0);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(h.latest_drive().unwrap().0, DriveCommand::new(1.0, 0.3));
    }

    #[test]
    fn stop_returns_to_manual() {
        let h = LoopHandle::new(Arc::new(VirtualClock::new()), DriveMode::Autopilot);
        let reply = handle_control(&ControlMessage::Stop, &h);
        assert!(matches!(reply, Reply::Ack { mode: DriveMode::Manual, .. }));
        assert_eq!(h.mode(), DriveMode::Manual);
    }
}
