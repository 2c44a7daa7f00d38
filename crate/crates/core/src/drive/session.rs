use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::actuation::{actuate, ActuationCommand, LoopConfig};
use super::handle::{DriveMode, LoopHandle};
use super::pilot::{DriveCommand, Observation, Pilot, PilotOutput, TeleopPilot};
use super::world::World;
use crate::dataset::{DriveRecord, LapRecord, PoseRecord, RecordMode, Tub};
use crate::sim::{ImageFrame, VehicleState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
}

impl From<&VehicleState> for Pose {
    fn from(s: &VehicleState) -> Self {
        Self {
            x_m: s.x_m,
            y_m: s.y_m,
            heading_rad: s.heading_rad,
        }
    }
}

/// Outcome of one control cycle. Pose, speed and track position are after the
/// vehicle step; `command` is what was actually executed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TickReport {
    pub tick: u64,
    pub sim_time_s: f64,
    pub mode: DriveMode,
    pub pilot: String,
    pub command: DriveCommand,
    pub actuation: ActuationCommand,
    pub pose: Pose,
    pub speed_mps: f64,
    pub progress_m: f64,
    pub lateral_offset_m: f64,
    pub safe_stop: bool,
    pub error: Option<String>,
    pub record_index: Option<usize>,
    pub latency_ms: f64,
}

/// Receives every tick. Implementations must return promptly: the control loop
/// calls this inline.
pub trait TelemetrySink: Send + Sync {
    fn publish(&self, report: &TickReport, frame: &ImageFrame);
}

pub struct NullSink;

impl TelemetrySink for NullSink {
    fn publish(&self, _report: &TickReport, _frame: &ImageFrame) {}
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub ticks: u64,
    pub overruns: u64,
    pub errors: u64,
    pub safe_stops: u64,
    pub records_written: u64,
    pub mean_latency_ms: f64,
    pub max_latency_ms: f64,
    pub max_publish_ms: f64,
    pub sim_time_s: f64,
    pub wall_time_s: f64,
    pub last_error: Option<String>,
}

impl SessionSummary {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::file(path, e))
    }
}

/// A world, its pilots and the loop state. Owned by exactly one control thread.
pub struct Session {
    pub world: World,
    cfg: LoopConfig,
    handle: Arc<LoopHandle>,
    manual: Box<dyn Pilot>,
    autopilot: Option<Box<dyn Pilot>>,
    tub: Option<Tub>,
    sink: Arc<dyn TelemetrySink>,
    tick: u64,
    latency_sum_ms: f64,
    summary: SessionSummary,
}

impl Session {
    /// Manual driving defaults to the teleop mailbox of `handle`.
    pub fn new(world: World, cfg: LoopConfig, handle: Arc<LoopHandle>) -> Result<Self> {
        cfg.validate()?;
        let teleop = TeleopPilot::new(
            handle.clone(),
            Duration::from_millis(cfg.teleop_hold_timeout_ms),
        );
        Ok(Self {
            world,
            cfg,
            handle,
            manual: Box::new(teleop),
            autopilot: None,
            tub: None,
            sink: Arc::new(NullSink),
            tick: 0,
            latency_sum_ms: 0.0,
            summary: SessionSummary::default(),
        })
    }

    pub fn with_manual(mut self, pilot: impl Pilot + 'static) -> Self {
        self.manual = Box::new(pilot);
        self
    }

    pub fn with_autopilot(mut self, pilot: impl Pilot + 'static) -> Self {
        self.autopilot = Some(Box::new(pilot));
        self
    }

    pub fn with_tub(mut self, tub: Tub) -> Self {
        self.tub = Some(tub);
        self
    }

    pub fn with_sink(mut self, sink: Arc<dyn TelemetrySink>) -> Self {
        self.sink = sink;
        self
    }

    /// Continues tick numbering (and simulated time) from `tick`.
    pub fn starting_at_tick(mut self, tick: u64) -> Self {
        self.tick = tick;
        self
    }

    pub fn handle(&self) -> &Arc<LoopHandle> {
        &self.handle
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    pub fn tub(&self) -> Option<&Tub> {
        self.tub.as_ref()
    }

    pub fn take_tub(&mut self) -> Option<Tub> {
        self.tub.take()
    }

    pub fn manual_pilot_mut(&mut self) -> &mut dyn Pilot {
        &mut *self.manual
    }

    pub fn summary(&self) -> &SessionSummary {
        &self.summary
    }

    pub fn ticks(&self) -> u64 {
        self.tick
    }

    fn decide(&mut self, mode: DriveMode, frame: &ImageFrame, sim_time_s: f64) -> Result<(PilotOutput, String)> {
        let world = &self.world;
        let obs = Observation {
            frame,
            state: &world.state,
            track: &world.track,
            vehicle: &world.vehicle,
            sim_time_s,
            dt_s: self.cfg.period_s(),
            now: self.handle.now(),
        };
        let pilot: &mut dyn Pilot = match mode {
            DriveMode::Autopilot => match self.autopilot.as_deref_mut() {
                Some(p) => p,
                None => return Err(Error::Config("autopilot mode without a loaded model".into())),
            },
            DriveMode::Manual | DriveMode::ManualRecord => &mut *self.manual,
        };
        let name = pilot.name().to_string();
        let out = pilot.decide(&obs)?;
        let finite = [out.command, out.label]
            .iter()
            .all(|c| c.steering_norm.is_finite() && c.throttle_norm.is_finite());
        if !finite {
            return Err(Error::Domain(format!("{name} pilot produced a non-finite command")));
        }
        Ok((out, name))
    }

    fn record(&mut self, mode: DriveMode, frame: &ImageFrame, label: DriveCommand, pre: &VehicleState, sim_time_s: f64) -> Result<Option<usize>> {
        let Some(tub) = self.tub.as_mut() else {
            return Ok(None);
        };
        if !mode.records() {
            return Ok(None);
        }
        let record_mode = if mode == DriveMode::Autopilot {
            RecordMode::Autopilot
        } else {
            RecordMode::Manual
        };
        let mut rec = DriveRecord::new(
            label.steering_norm,
            label.throttle_norm,
            (sim_time_s * 1000.0).round() as u64,
            record_mode,
        );
        rec.speed_mps = pre.speed_mps;
        rec.pose = Some(PoseRecord {
            x_m: pre.x_m,
            y_m: pre.y_m,
            heading_rad: pre.heading_rad,
        });
        let track = &self.world.track;
        let proj = track.project(crate::sim::Point::new(pre.x_m, pre.y_m))?;
        rec.lap = Some(LapRecord {
            progress_m: proj.arc_length,
            lateral_offset_m: proj.signed,
        });
        tub.append_record(frame, rec).map(Some)
    }

    /// One control cycle: render, decide, clamp, actuate, step, record, publish.
    /// Failures are reported in the returned value and answered with a safe stop.
    pub fn control_tick(&mut self) -> TickReport {
        let started = Instant::now();
        let tick = self.tick;
        let dt = self.cfg.period_s();
        let sim_time_s = tick as f64 * dt;
        let mode = self.handle.mode();
        let frame = self.world.render();
        let pre = self.world.state;

        let mut errors: Vec<String> = Vec::new();
        let (output, pilot) = match self.decide(mode, &frame, sim_time_s) {
            Ok(v) => (Some(v.0), v.1),
            Err(e) => {
                errors.push(e.to_string());
                (None, String::from("safe_stop"))
            }
        };
        let safe_stop = output.is_none();
        let (mut command, mut label) = match output {
            Some(o) => (o.command.clamped().0, o.label.clamped().0),
            None => (DriveCommand::STOP, DriveCommand::STOP),
        };
        if mode == DriveMode::Autopilot {
            let cap = self.cfg.autopilot_throttle_cap;
            command.throttle_norm = command.throttle_norm.min(cap);
            label.throttle_norm = label.throttle_norm.min(cap);
        }
        let actuation = actuate(command.steering_norm, command.throttle_norm, &self.cfg);
        let (steer, throttle) = actuation.to_normalized(&self.cfg);
        if let Err(e) = self.world.step(steer, throttle, dt) {
            errors.push(e.to_string());
        }
        let record_index = match self.record(mode, &frame, label, &pre, sim_time_s) {
            Ok(i) => i,
            Err(e) => {
                errors.push(format!("record: {e}"));
                None
            }
        };
        let (progress_m, lateral_offset_m) = match self.world.track.project(crate::sim::Point::new(
            self.world.state.x_m,
            self.world.state.y_m,
        )) {
            Ok(p) => (p.arc_length, p.signed),
            Err(_) => (f64::NAN, f64::NAN),
        };

        let mut report = TickReport {
            tick,
            sim_time_s,
            mode,
            pilot,
            command,
            actuation,
            pose: Pose::from(&self.world.state),
            speed_mps: self.world.state.speed_mps,
            progress_m,
            lateral_offset_m,
            safe_stop,
            error: (!errors.is_empty()).then(|| errors.join("; ")),
            record_index,
            latency_ms: 0.0,
        };
        let publish_started = Instant::now();
        report.latency_ms = (publish_started - started).as_secs_f64() * 1e3;
        self.sink.publish(&report, &frame);
        let publish_ms = publish_started.elapsed().as_secs_f64() * 1e3;
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;

        let s = &mut self.summary;
        s.ticks += 1;
        s.sim_time_s = (tick + 1) as f64 * dt;
        s.safe_stops += safe_stop as u64;
        s.records_written += record_index.is_some() as u64;
        if let Some(e) = &report.error {
            s.errors += 1;
            s.last_error = Some(e.clone());
        }
        self.latency_sum_ms += latency_ms;
        s.mean_latency_ms = self.latency_sum_ms / s.ticks as f64;
        s.max_latency_ms = s.max_latency_ms.max(latency_ms);
        s.max_publish_ms = s.max_publish_ms.max(publish_ms);
        self.handle.set_summary(s);
        self.tick += 1;
        report
    }

    /// Runs ticks on a fixed grid `start + k * period` until shutdown is requested
    /// or `duration` elapses. A tick that ends past the next deadline counts as an
    /// overrun; the next tick then starts at once and the grid is re-anchored, so
    /// the loop never runs more than one catch-up tick.
    pub fn run_loop(&mut self, duration: Option<Duration>) -> SessionSummary {
        let period = Duration::from_secs_f64(self.cfg.period_s());
        let wall = Instant::now();
        let start = self.handle.now();
        let mut deadline = start;
        loop {
            self.handle.clock().sleep_until(deadline);
            if self.handle.is_shutdown() {
                break;
            }
            if let Some(d) = duration {
                if self.handle.now() >= start + d {
                    break;
                }
            }
            self.control_tick();
            let end = self.handle.now();
            let next = deadline + period;
            if end > next {
                self.summary.overruns += 1;
                deadline = end;
            } else {
                deadline = next;
            }
            self.summary.wall_time_s = wall.elapsed().as_secs_f64();
            self.handle.set_summary(&self.summary);
        }
        self.summary.wall_time_s = wall.elapsed().as_secs_f64();
        self.handle.set_summary(&self.summary);
        self.summary.clone()
    }
}
