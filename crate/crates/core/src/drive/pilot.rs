use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::handle::LoopHandle;
use crate::dataset::resize_image;
use crate::nn::{forward, ModelSpec, ModelWeights, Scalar};
use crate::sim::{wrap_angle, ImageFrame, Point, TrackSpec, VehicleParams, VehicleState};
use crate::{Error, Result};

/// Normalized steering (positive = left) and throttle, both nominally in [-1, 1].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DriveCommand {
    pub steering_norm: f64,
    pub throttle_norm: f64,
}

impl DriveCommand {
    pub const STOP: DriveCommand = DriveCommand {
        steering_norm: 0.0,
        throttle_norm: 0.0,
    };

    pub fn new(steering_norm: f64, throttle_norm: f64) -> Self {
        Self {
            steering_norm,
            throttle_norm,
        }
    }

    /// Clamped copy and whether clamping changed anything.
    pub fn clamped(self) -> (Self, bool) {
        let c = Self::new(
            super::clamp_norm(self.steering_norm),
            super::clamp_norm(self.throttle_norm),
        );
        (c, c != self)
    }
}

/// What a pilot sees each tick.
pub struct Observation<'a> {
    pub frame: &'a ImageFrame,
    pub state: &'a VehicleState,
    pub track: &'a TrackSpec,
    pub vehicle: &'a VehicleParams,
    pub sim_time_s: f64,
    pub dt_s: f64,
    /// Loop clock reading, used for teleop staleness.
    pub now: Duration,
}

/// `command` is executed; `label` is what gets recorded as the training target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PilotOutput {
    pub command: DriveCommand,
    pub label: DriveCommand,
}

impl From<DriveCommand> for PilotOutput {
    fn from(command: DriveCommand) -> Self {
        Self {
            command,
            label: command,
        }
    }
}

pub trait Pilot: Send {
    fn name(&self) -> &str;
    fn decide(&mut self, obs: &Observation<'_>) -> Result<PilotOutput>;
}

pub struct ConstantPilot(pub DriveCommand);

impl Pilot for ConstantPilot {
    fn name(&self) -> &str {
        "constant"
    }

    fn decide(&mut self, _obs: &Observation<'_>) -> Result<PilotOutput> {
        Ok(self.0.into())
    }
}

/// Follows the latest command in the loop handle's mailbox (zero-order hold).
pub struct TeleopPilot {
    handle: Arc<LoopHandle>,
    hold_timeout: Duration,
}

impl TeleopPilot {
    pub fn new(handle: Arc<LoopHandle>, hold_timeout: Duration) -> Self {
        Self {
            handle,
            hold_timeout,
        }
    }
}

impl Pilot for TeleopPilot {
    fn name(&self) -> &str {
        "teleop"
    }

    fn decide(&mut self, obs: &Observation<'_>) -> Result<PilotOutput> {
        match self.handle.latest_drive() {
            None => Ok(DriveCommand::STOP.into()),
            Some((cmd, at)) => {
                let age = obs.now.saturating_sub(at);
                if age > self.hold_timeout {
                    Err(Error::Domain(format!(
                        "teleop command stale ({} ms old)",
                        age.as_millis()
                    )))
                } else {
                    Ok(cmd.into())
                }
            }
        }
    }
}

/// Runs the regression network on each frame.
pub struct CnnPilot<T> {
    spec: ModelSpec,
    weights: ModelWeights<T>,
}

impl<T: Scalar> CnnPilot<T> {
    pub fn new(spec: ModelSpec, weights: ModelWeights<T>) -> Result<Self> {
        spec.validate()?;
        weights.check_spec(&spec)?;
        Ok(Self { spec, weights })
    }
}

impl<T: Scalar> Pilot for CnnPilot<T> {
    fn name(&self) -> &str {
        "cnn"
    }

    fn decide(&mut self, obs: &Observation<'_>) -> Result<PilotOutput> {
        let (w, h) = (self.spec.input.width as u32, self.spec.input.height as u32);
        let (s, t) = if obs.frame.width_px == w && obs.frame.height_px == h {
            forward(&self.spec, &self.weights, obs.frame)?
        } else {
            forward(&self.spec, &self.weights, &resize_image(obs.frame, w, h)?)?
        };
        let (s, t) = (s.as_f64(), t.as_f64());
        if !(s.is_finite() && t.is_finite()) {
            return Err(Error::Domain("network produced a non-finite command".into()));
        }
        Ok(DriveCommand::new(s, t).into())
    }
}

/// Geometric path tracker steering toward a point `lookahead_m` ahead on the
/// centerline. Needs ground-truth pose, so it only exists in simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PurePursuitPilot {
    pub lookahead_m: f64,
    pub throttle_norm: f64,
}

impl PurePursuitPilot {
    pub fn new(lookahead_m: f64, throttle_norm: f64) -> Self {
        Self {
            lookahead_m,
            throttle_norm,
        }
    }

    /// Throttle that settles at `speed_mps` for the given vehicle.
    pub fn for_speed(speed_mps: f64, vehicle: &VehicleParams) -> Self {
        Self::new(0.45, (speed_mps / vehicle.max_speed_mps).clamp(0.0, 1.0))
    }

    pub fn steering(&self, state: &VehicleState, track: &TrackSpec, vehicle: &VehicleParams) -> Result<f64> {
        let here = track.project(Point::new(state.x_m, state.y_m))?;
        let (goal, _) = track.point_at(here.arc_length + self.lookahead_m);
        let (dx, dy) = (goal.x - state.x_m, goal.y - state.y_m);
        let dist = dx.hypot(dy);
        if dist < 1e-9 {
            return Ok(0.0);
        }
        let alpha = wrap_angle(dy.atan2(dx) - state.heading_rad);
        let delta = (2.0 * vehicle.wheelbase_m * alpha.sin() / dist).atan();
        Ok((delta / vehicle.max_steer_rad).clamp(-1.0, 1.0))
    }
}

impl Pilot for PurePursuitPilot {
    fn name(&self) -> &str {
        "reference"
    }

    fn decide(&mut self, obs: &Observation<'_>) -> Result<PilotOutput> {
        let s = self.steering(obs.state, obs.track, obs.vehicle)?;
        Ok(DriveCommand::new(s, self.throttle_norm).into())
    }
}

/// Adds an Ornstein-Uhlenbeck steering perturbation to the executed command while
/// keeping the wrapped pilot's clean command as the label. Driving data recorded
/// this way shows the car drifting off line together with the correction.
pub struct NoisyPilot<P> {
    inner: P,
    sigma: f64,
    theta: f64,
    noise: f64,
    rng: ChaCha8Rng,
}

impl<P: Pilot> NoisyPilot<P> {
    /// `sigma` is the stationary standard deviation of the perturbation and
    /// `theta` its mean-reversion rate in 1/s.
    pub fn new(inner: P, sigma: f64, theta: f64, seed: u64) -> Self {
        Self {
            inner,
            sigma,
            theta,
            noise: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn reset_noise(&mut self) {
        self.noise = 0.0;
    }
}

impl<P: Pilot> Pilot for NoisyPilot<P> {
    fn name(&self) -> &str {
        "noisy"
    }

    fn decide(&mut self, obs: &Observation<'_>) -> Result<PilotOutput> {
        let out = self.inner.decide(obs)?;
        // exact discretization of the OU process
        let decay = (-self.theta * obs.dt_s).exp();
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.noise = self.noise * decay + self.sigma * (1.0 - decay * decay).sqrt() * z;
        let mut command = out.command;
        command.steering_norm = (command.steering_norm + self.noise).clamp(-1.0, 1.0);
        Ok(PilotOutput {
            command,
            label: out.label,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_default_track, CameraModel};

    fn obs<'a>(frame: &'a ImageFrame, state: &'a VehicleState, track: &'a TrackSpec, v: &'a VehicleParams) -> Observation<'a> {
        Observation {
            frame,
            state,
            track,
            vehicle: v,
            sim_time_s: 0.0,
            dt_s: 0.05,
            now: Duration::ZERO,
        }
    }

    fn square(side: f64) -> TrackSpec {
        let corners = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)];
        let mut pts = Vec::new();
        for k in 0..4 {
            let ((ax, ay), (bx, by)) = (corners[k], corners[(k + 1) % 4]);
            for i in 0..40 {
                let t = i as f64 / 40.0;
                pts.push(Point::new(0.5 + ax + t * (bx - ax), 0.5 + ay + t * (by - ay)));
            }
        }
        TrackSpec::new(pts, 0.6, (side + 1.0, side + 1.0))
    }

    #[test]
    fn pure_pursuit_is_straight_on_the_line_and_corrects_offsets() {
        let track = square(4.0);
        let v = VehicleParams::default();
        let frame = ImageFrame::filled(2, 2, [0, 0, 0]);
        let pp = PurePursuitPilot::for_speed(0.65, &v);
        assert!((pp.throttle_norm - 0.325).abs() < 1e-12);
        let on_line = VehicleState::at_rest(2.0, 0.5, 0.0);
        assert!(pp.steering(&on_line, &track, &v).unwrap().abs() < 1e-12);
        // left of the line: steer right (negative), and the other way round
        let mut p = pp.clone();
        let left = VehicleState::at_rest(2.0, 0.6, 0.0);
        assert!(p.decide(&obs(&frame, &left, &track, &v)).unwrap().command.steering_norm < -0.1);
        let right = VehicleState::at_rest(2.0, 0.4, 0.0);
        assert!(pp.steering(&right, &track, &v).unwrap() > 0.1);
    }

    #[test]
    fn pure_pursuit_steers_with_curvature() {
        // centered on a circle of radius r, heading tangent (counterclockwise)
        let r = 1.0;
        let pts: Vec<Point> = (0..400)
            .map(|i| {
                let a = i as f64 / 400.0 * std::f64::consts::TAU;
                Point::new(2.5 + r * a.cos(), 2.5 + r * a.sin())
            })
            .collect();
        let track = TrackSpec::new(pts, 0.5, (5.0, 5.0));
        let v = VehicleParams::default();
        let state = VehicleState::at_rest(3.5, 2.5, std::f64::consts::FRAC_PI_2);
        let pp = PurePursuitPilot::new(0.45, 0.3);
        // chord of length d on a circle subtends alpha = asin(d / 2r); delta = atan(L / r)
        let delta = pp.steering(&state, &track, &v).unwrap() * v.max_steer_rad;
        assert!((delta - (v.wheelbase_m / r).atan()).abs() < 2e-3, "{delta}");
    }

    #[test]
    fn noisy_pilot_labels_clean_command() {
        let track = make_default_track();
        let v = VehicleParams::default();
        let frame = ImageFrame::filled(2, 2, [0, 0, 0]);
        let state = track.start_state();
        let mut p = NoisyPilot::new(ConstantPilot(DriveCommand::new(0.1, 0.4)), 0.3, 2.0, 7);
        let mut spread = 0.0f64;
        for _ in 0..200 {
            let out = p.decide(&obs(&frame, &state, &track, &v)).unwrap();
            assert_eq!(out.label, DriveCommand::new(0.1, 0.4));
            assert_eq!(out.command.throttle_norm, 0.4);
            spread = spread.max((out.command.steering_norm - 0.1).abs());
        }
        assert!(spread > 0.1);
    }

    #[test]
    fn cnn_pilot_resizes_frames() {
        let spec = ModelSpec::default();
        let weights = ModelWeights::<f32>::zeros(&spec).unwrap();
        let mut p = CnnPilot::new(spec, weights).unwrap();
        let track = make_default_track();
        let v = VehicleParams::default();
        let cam = CameraModel { image_width_px: 80, image_height_px: 60, ..CameraModel::default() };
        let state = track.start_state();
        let frame = crate::sim::render_camera(&track, &state, &cam);
        let out = p.decide(&obs(&frame, &state, &track, &v)).unwrap();
        assert_eq!(out.command, DriveCommand::STOP);
    }
}
