use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::actuation::LoopConfig;
use super::handle::{DriveMode, LoopHandle, VirtualClock};
use super::pilot::{NoisyPilot, PurePursuitPilot};
use super::session::Session;
use super::world::World;
use crate::dataset::Tub;
use crate::sim::VehicleState;
use crate::Result;

/// Settings for generating labelled driving data with the reference pilot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub frames: usize,
    /// Frames per episode; each episode starts from a random pose on the track.
    pub episode_frames: usize,
    pub speed_mps: f64,
    /// Stationary standard deviation of the executed steering perturbation.
    pub noise_sigma: f64,
    pub noise_theta: f64,
    pub start_offset_m: f64,
    pub start_heading_rad: f64,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            frames: 2000,
            episode_frames: 200,
            speed_mps: 0.8,
            noise_sigma: 0.3,
            noise_theta: 1.5,
            start_offset_m: 0.1,
            start_heading_rad: 0.2,
            seed: 0,
        }
    }
}

/// Drives the reference pilot with steering noise in simulated time and appends
/// `frames` records to `tub`, labelled with the noise-free command. An episode
/// also ends early when the car gets close to the lane edge.
pub fn collect_reference_data(world: &World, loop_cfg: &LoopConfig, cfg: &CollectConfig, mut tub: Tub) -> Result<Tub> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let perimeter = world.track.perimeter();
    let edge = 0.85 * world.track.lane_width_m / 2.0;
    let reference = PurePursuitPilot::for_speed(cfg.speed_mps, &world.vehicle);
    let mut written = 0;
    let mut episode = 0u64;
    while written < cfg.frames {
        let s = rng.gen_range(0.0..perimeter);
        let (p, dir) = world.track.point_at(s);
        let offset = rng.gen_range(-cfg.start_offset_m..=cfg.start_offset_m);
        let heading = dir.1.atan2(dir.0) + rng.gen_range(-cfg.start_heading_rad..=cfg.start_heading_rad);
        let mut start = VehicleState::at_rest(p.x - dir.1 * offset, p.y + dir.0 * offset, heading);
        start.speed_mps = cfg.speed_mps;

        let mut w = world.clone();
        w.state = start;
        let handle = LoopHandle::new(Arc::new(VirtualClock::new()), DriveMode::ManualRecord);
        let pilot = NoisyPilot::new(
            reference.clone(),
            cfg.noise_sigma,
            cfg.noise_theta,
            cfg.seed ^ episode.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut session = Session::new(w, loop_cfg.clone(), handle)?
            .with_manual(pilot)
            .with_tub(tub)
            .starting_at_tick(written as u64);
        let target = (written + cfg.episode_frames).min(cfg.frames);
        while written < target {
            let r = session.control_tick();
            if let Some(e) = r.error {
                return Err(crate::Error::Domain(e));
            }
            written += 1;
            if r.lateral_offset_m.abs() > edge {
                break;
            }
        }
        tub = session.take_tub().expect("session owns the tub");
        episode += 1;
    }
    Ok(tub)
}
