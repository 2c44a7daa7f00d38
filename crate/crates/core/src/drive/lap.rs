use serde::{Deserialize, Serialize};

use super::handle::DriveMode;
use super::session::Session;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapReport {
    pub lap: usize,
    pub completed: bool,
    pub lap_time_s: f64,
    /// Centerline progress divided by lap time.
    pub mean_speed_mps: f64,
    pub max_abs_offset_m: f64,
    pub progress_m: f64,
    /// Why the lap ended early: `off_track`, `timeout` or a pilot error.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<String>,
}

/// Drives `laps` consecutive laps in simulated time with the session's autopilot.
/// Progress is unwrapped tick to tick, so a lap completes when the car has covered
/// one perimeter of centerline; the crossing time is interpolated inside the tick.
/// Stops after the first failed lap.
pub fn eval_laps(session: &mut Session, laps: usize, timeout_s: f64) -> Result<Vec<LapReport>> {
    session.handle().set_mode(DriveMode::Autopilot);
    let track = &session.world.track;
    let perimeter = track.perimeter();
    let half_lane = track.lane_width_m / 2.0;
    let dt = session.config().period_s();
    let mut prev = session.world.progress_m()?;
    let mut covered = 0.0;
    let mut lap_start = session.ticks() as f64 * dt;
    let mut max_off = session.world.lateral_offset_m()?.abs();
    let mut reports = Vec::new();

    while reports.len() < laps {
        let r = session.control_tick();
        if r.mode != DriveMode::Autopilot {
            return Err(Error::Config("drive mode changed during lap evaluation".into()));
        }
        let t_end = r.sim_time_s + dt;
        let delta = (r.progress_m - prev + perimeter / 2.0).rem_euclid(perimeter) - perimeter / 2.0;
        prev = r.progress_m;
        let before = covered;
        covered += delta;
        max_off = max_off.max(r.lateral_offset_m.abs());

        let failure = if let Some(e) = r.error {
            Some(e)
        } else if r.lateral_offset_m.abs() > half_lane {
            Some("off_track".to_string())
        } else if covered < perimeter && t_end - lap_start > timeout_s {
            Some("timeout".to_string())
        } else {
            None
        };
        if let Some(reason) = failure {
            let t = t_end - lap_start;
            reports.push(LapReport {
                lap: reports.len() + 1,
                completed: false,
                lap_time_s: t,
                mean_speed_mps: covered.max(0.0) / t,
                max_abs_offset_m: max_off,
                progress_m: covered,
                failure: Some(reason),
            });
            break;
        }
        if covered >= perimeter {
            let crossing = t_end - dt + (perimeter - before) / delta * dt;
            let lap_time_s = crossing - lap_start;
            reports.push(LapReport {
                lap: reports.len() + 1,
                completed: true,
                lap_time_s,
                mean_speed_mps: perimeter / lap_time_s,
                max_abs_offset_m: max_off,
                progress_m: perimeter,
                failure: None,
            });
            covered -= perimeter;
            lap_start = crossing;
            max_off = r.lateral_offset_m.abs();
        }
    }
    Ok(reports)
}
