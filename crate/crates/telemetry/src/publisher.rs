use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use axum::extract::ws::Utf8Bytes;
use base64::Engine as _;
use image::codecs::jpeg::JpegEncoder;
use image::ExtendedColorType;
use pilotstack_core::drive::{TelemetrySink, TickReport};
use pilotstack_core::sim::ImageFrame;
use tokio::sync::broadcast;

use crate::messages::TelemetryMessage;

/// Fan-out of serialized messages to every connected client.
///
/// Backed by a bounded broadcast ring: sending never waits, and a client that
/// falls more than `capacity` messages behind skips to the newest ones.
#[derive(Clone)]
pub struct TelemetryHub {
    tx: broadcast::Sender<Utf8Bytes>,
}

impl TelemetryHub {
    pub fn new(capacity: usize) -> Self {
        let (tx, _) = broadcast::channel(capacity.max(1));
        Self { tx }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Utf8Bytes> {
        self.tx.subscribe()
    }

    pub fn receivers(&self) -> usize {
        self.tx.receiver_count()
    }

    pub fn send_json(&self, json: String) {
        // An error only means nobody is listening.
        let _ = self.tx.send(Utf8Bytes::from(json));
    }

    pub fn send(&self, msg: &TelemetryMessage) {
        if let Ok(json) = serde_json::to_string(msg) {
            self.send_json(json);
        }
    }
}

impl Default for TelemetryHub {
    fn default() -> Self {
        Self::new(64)
    }
}

/// Admits at most one camera frame per `1 / rate_hz` of the given timeline.
#[derive(Debug, Clone)]
pub struct FrameGate {
    interval_s: f64,
    next_s: Option<f64>,
}

impl FrameGate {
    pub fn new(rate_hz: f64) -> Self {
        Self {
            interval_s: if rate_hz > 0.0 { 1.0 / rate_hz } else { f64::INFINITY },
            next_s: None,
        }
    }

    pub fn admit(&mut self, t_s: f64) -> bool {
        // tolerance so a 20 Hz timeline decimated to 10 Hz keeps every other tick
        const EPS: f64 = 1e-6;
        match self.next_s {
            Some(next) if t_s + EPS < next => false,
            Some(next) => {
                let advanced = next + self.interval_s;
                self.next_s = Some(if advanced + EPS < t_s { t_s + self.interval_s } else { advanced });
                true
            }
            None => {
                self.next_s = Some(t_s + self.interval_s);
                true
            }
        }
    }
}

pub fn encode_jpeg_b64(frame: &ImageFrame, quality: u8) -> Result<String, image::ImageError> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(
        &frame.pixels,
        frame.width_px,
        frame.height_px,
        ExtendedColorType::Rgb8,
    )?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf))
}

/// The loop-side end of the hub. Does no work at all while no client is connected.
pub struct TelemetryPublisher {
    hub: TelemetryHub,
    gate: Mutex<FrameGate>,
    jpeg_quality: u8,
    sent: AtomicU64,
}

impl TelemetryPublisher {
    pub fn new(hub: TelemetryHub, stream_rate_hz: f64, jpeg_quality: u8) -> Self {
        Self {
            hub,
            gate: Mutex::new(FrameGate::new(stream_rate_hz)),
            jpeg_quality,
            sent: AtomicU64::new(0),
        }
    }

    pub fn hub(&self) -> &TelemetryHub {
        &self.hub
    }

    /// Messages handed to the hub so far.
    pub fn sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }
}

impl TelemetrySink for TelemetryPublisher {
    fn publish(&self, report: &TickReport, frame: &ImageFrame) {
        if self.hub.receivers() == 0 {
            return;
        }
        let with_frame = self
            .gate
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .admit(report.sim_time_s);
        let jpeg = with_frame
            .then(|| encode_jpeg_b64(frame, self.jpeg_quality).ok())
            .flatten();
        self.hub.send(&TelemetryMessage::from_report(report, jpeg));
        self.sent.fetch_add(1, Ordering::Relaxed);
    }
}
