use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use pilotstack_core::dataset::Tub;
use pilotstack_core::drive::LoopConfig;

use crate::messages::TelemetryMessage;
use crate::publisher::{encode_jpeg_b64, FrameGate, TelemetryHub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplaySummary {
    pub messages: usize,
    pub frames: usize,
    pub wall_time_s: f64,
}

/// Re-publishes a recorded session in catalog order, keeping the original record
/// indices as tick numbers and spacing messages by `timestamp / speed`.
pub fn replay_tub(
    tub: &Tub,
    hub: &TelemetryHub,
    loop_cfg: &LoopConfig,
    speed: f64,
    stream_rate_hz: f64,
    stop: &AtomicBool,
) -> pilotstack_core::Result<ReplaySummary> {
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(pilotstack_core::Error::Config(format!("replay speed {speed} must be positive")));
    }
    let started = Instant::now();
    let t0 = tub.records().first().map_or(0, |r| r.timestamp_ms);
    let mut gate = FrameGate::new(stream_rate_hz);
    let mut summary = ReplaySummary {
        messages: 0,
        frames: 0,
        wall_time_s: 0.0,
    };
    for (i, rec) in tub.records().iter().enumerate() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let t = rec.timestamp_ms.saturating_sub(t0) as f64 / 1000.0;
        let due = Duration::from_secs_f64(t / speed);
        let elapsed = started.elapsed();
        if due > elapsed {
            std::thread::sleep(due - elapsed);
        }
        let jpeg = if gate.admit(t / speed) {
            encode_jpeg_b64(&tub.read_image(i)?, 70).ok()
        } else {
            None
        };
        summary.frames += jpeg.is_some() as usize;
        hub.send(&TelemetryMessage::from_record(rec, loop_cfg, jpeg));
        summary.messages += 1;
    }
    summary.wall_time_s = started.elapsed().as_secs_f64();
    Ok(summary)
}
