use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Longest internal integration step, seconds.
const MAX_SUBSTEP_S: f64 = 1e-3;

/// Physical constants of the simulated car.
///
/// Body length, width and mass follow the 1:10-scale competition chassis
/// (330 mm x 190 mm, 2.2 kg). Wheelbase, track width, steering lock and speed
/// limits are not measured on the real car and are configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub wheelbase_m: f64,
    pub track_width_m: f64,
    pub length_m: f64,
    pub width_m: f64,
    pub mass_kg: f64,
    pub max_steer_rad: f64,
    pub max_speed_mps: f64,
    /// Time constant of the first-order lag between commanded and actual speed.
    #[serde(default = "default_speed_tau")]
    pub speed_tau_s: f64,
}

fn default_speed_tau() -> f64 {
    0.5
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase_m: 0.20,
            track_width_m: 0.16,
            length_m: 0.33,
            width_m: 0.19,
            mass_kg: 2.2,
            max_steer_rad: 0.45,
            max_speed_mps: 2.0,
            speed_tau_s: default_speed_tau(),
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("wheelbase_m", self.wheelbase_m),
            ("track_width_m", self.track_width_m),
            ("length_m", self.length_m),
            ("width_m", self.width_m),
            ("mass_kg", self.mass_kg),
            ("max_steer_rad", self.max_steer_rad),
            ("max_speed_mps", self.max_speed_mps),
            ("speed_tau_s", self.speed_tau_s),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!(
                    "vehicle {name} must be strictly positive, got {value}"
                )));
            }
        }
        if self.max_steer_rad >= PI / 2.0 {
            return Err(Error::Config(format!(
                "vehicle max_steer_rad must be below pi/2, got {}",
                self.max_steer_rad
            )));
        }
        if self.wheelbase_m >= self.length_m {
            return Err(Error::Config(
                "vehicle wheelbase_m must be shorter than length_m".into(),
            ));
        }
        if self.track_width_m >= self.width_m {
            return Err(Error::Config(
                "vehicle track_width_m must be narrower than width_m".into(),
            ));
        }
        Ok(())
    }

    /// Turning radius of the rear-axle center for a bicycle steer angle.
    pub fn turning_radius(&self, steer_rad: f64) -> f64 {
        self.wheelbase_m / steer_rad.tan()
    }
}

/// Pose and motion of the rear-axle reference point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x_m: f64,
    pub y_m: f64,
    /// Wrapped to (-pi, pi].
    pub heading_rad: f64,
    pub speed_mps: f64,
    pub steer_rad: f64,
}

impl VehicleState {
    pub fn at_rest(x_m: f64, y_m: f64, heading_rad: f64) -> Self {
        Self {
            x_m,
            y_m,
            heading_rad: wrap_angle(heading_rad),
            speed_mps: 0.0,
            steer_rad: 0.0,
        }
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Per-wheel steering angles `(inner, outer)` for a bicycle-equivalent steer angle.
///
/// The returned angles satisfy `cot(outer) - cot(inner) = track / wheelbase` and
/// carry the sign of `steer_rad`; the inner wheel is always the sharper one.
pub fn ackermann_angles(steer_rad: f64, params: &VehicleParams) -> Result<(f64, f64)> {
    if !steer_rad.is_finite() || steer_rad.abs() > params.max_steer_rad {
        return Err(Error::Domain(format!(
            "steer angle {steer_rad} outside [-{m}, {m}]",
            m = params.max_steer_rad
        )));
    }
    if steer_rad == 0.0 {
        return Ok((0.0, 0.0));
    }
    let l = params.wheelbase_m;
    let half_track = params.track_width_m / 2.0;
    // Radius to the rear-axle center, then the two wheels sit half a track either side.
    let radius = l / steer_rad.abs().tan();
    let inner = (l / (radius - half_track)).atan();
    let outer = (l / (radius + half_track)).atan();
    Ok((inner.copysign(steer_rad), outer.copysign(steer_rad)))
}

/// Advances the kinematic bicycle model by `dt` seconds.
///
/// Steering is applied instantly (`steer_norm * max_steer_rad`); speed follows a
/// first-order lag toward `max(0, throttle_norm) * max_speed_mps`. Integration is
/// forward Euler sub-stepped at no more than 1 ms.
pub fn step_vehicle(
    state: &VehicleState,
    throttle_norm: f64,
    steer_norm: f64,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState> {
    if !(throttle_norm.is_finite() && steer_norm.is_finite() && dt.is_finite()) {
        return Err(Error::Domain("non-finite vehicle input".into()));
    }
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(Error::Domain(format!("time step {dt} outside (0, 0.1]")));
    }
    let state_ok = [state.x_m, state.y_m, state.heading_rad, state.speed_mps]
        .iter()
        .all(|v| v.is_finite());
    if !state_ok {
        return Err(Error::Domain("non-finite vehicle state".into()));
    }

    let steer_rad = steer_norm.clamp(-1.0, 1.0) * params.max_steer_rad;
    let target_speed = throttle_norm.clamp(0.0, 1.0) * params.max_speed_mps;
    let yaw_gain = steer_rad.tan() / params.wheelbase_m;

    let substeps = (dt / MAX_SUBSTEP_S).ceil().max(1.0) as usize;
    let h = dt / substeps as f64;
    let lag = h / params.speed_tau_s;

    let mut x = state.x_m;
    let mut y = state.y_m;
    let mut heading = state.heading_rad;
    let mut speed = state.speed_mps.max(0.0);
    for _ in 0..substeps {
        let (sin_h, cos_h) = heading.sin_cos();
        x += speed * cos_h * h;
        y += speed * sin_h * h;
        heading += speed * yaw_gain * h;
        speed = (speed + (target_speed - speed) * lag).max(0.0);
    }

    Ok(VehicleState {
        x_m: x,
        y_m: y,
        heading_rad: wrap_angle(heading),
        speed_mps: speed,
        steer_rad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_ahead_has_no_wheel_angle() {
        let p = VehicleParams::default();
        assert_eq!(ackermann_angles(0.0, &p).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn ackermann_identity_at_design_point() {
        let p = VehicleParams::default();
        let (inner, outer) = ackermann_angles(0.30, &p).unwrap();
        let identity = 1.0 / outer.tan() - 1.0 / inner.tan();
        assert!((identity - 0.8).abs() < 1e-9, "{identity}");
        assert!(inner > outer && outer > 0.0);
    }

    #[test]
    fn negative_steer_mirrors_positive() {
        let p = VehicleParams::default();
        let (i_pos, o_pos) = ackermann_angles(0.2, &p).unwrap();
        let (i_neg, o_neg) = ackermann_angles(-0.2, &p).unwrap();
        assert_eq!(i_neg, -i_pos);
        assert_eq!(o_neg, -o_pos);
    }

    #[test]
    fn steer_beyond_lock_is_rejected() {
        let p = VehicleParams::default();
        assert!(matches!(ackermann_angles(0.5, &p), Err(Error::Domain(_))));
        assert!(matches!(ackermann_angles(f64::NAN, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn straight_line_motion() {
        let p = VehicleParams::default();
        let mut s = VehicleState {
            x_m: 1.0,
            y_m: 2.0,
            heading_rad: 0.6,
            speed_mps: 0.8,
            steer_rad: 0.0,
        };
        // throttle 0.4 * 2.0 m/s keeps the speed exactly at 0.8
        for _ in 0..100 {
            s = step_vehicle(&s, 0.4, 0.0, 0.02, &p).unwrap();
        }
        let dist = 0.8 * 2.0;
        assert!((s.x_m - (1.0 + dist * 0.6f64.cos())).abs() < 1e-9);
        assert!((s.y_m - (2.0 + dist * 0.6f64.sin())).abs() < 1e-9);
        assert!((s.heading_rad - 0.6).abs() < 1e-12);
    }

    #[test]
    fn no_reverse_from_rest() {
        let p = VehicleParams::default();
        let s = VehicleState::at_rest(0.0, 0.0, 0.0);
        let next = step_vehicle(&s, -1.0, 0.3, 0.05, &p).unwrap();
        assert_eq!(next.speed_mps, 0.0);
        assert_eq!((next.x_m, next.y_m, next.heading_rad), (0.0, 0.0, 0.0));
    }

    #[test]
    fn rejects_bad_step() {
        let p = VehicleParams::default();
        let s = VehicleState::default();
        assert!(step_vehicle(&s, 0.0, 0.0, 0.0, &p).is_err());
        assert!(step_vehicle(&s, 0.0, 0.0, 0.2, &p).is_err());
        assert!(step_vehicle(&s, f64::INFINITY, 0.0, 0.05, &p).is_err());
    }

    #[test]
    fn heading_wraps() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn default_params_are_valid() {
        VehicleParams::default().validate().unwrap();
        let bad = VehicleParams {
            wheelbase_m: 0.4,
            ..VehicleParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
