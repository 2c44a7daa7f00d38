use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub rate_hz: f64,
    pub servo_min_us: f64,
    pub servo_center_us: f64,
    pub servo_max_us: f64,
    /// PWM frame rate of the servo/motor controller.
    pub pwm_frame_hz: f64,
    pub throttle_deadband: f64,
    /// Upper bound on normalized throttle while the autopilot drives.
    pub autopilot_throttle_cap: f64,
    /// Manual commands older than this trigger a safe stop.
    pub teleop_hold_timeout_ms: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            rate_hz: 20.0,
            servo_min_us: 1000.0,
            servo_center_us: 1500.0,
            servo_max_us: 2000.0,
            pwm_frame_hz: 50.0,
            throttle_deadband: 0.05,
            autopilot_throttle_cap: 1.0,
            teleop_hold_timeout_ms: 500,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(5.0..=100.0).contains(&self.rate_hz) {
            return Err(Error::Config(format!("loop rate_hz {} outside [5, 100]", self.rate_hz)));
        }
        if !(self.servo_min_us < self.servo_center_us && self.servo_center_us < self.servo_max_us) {
            return Err(Error::Config(
                "servo range must satisfy min_us < center_us < max_us".into(),
            ));
        }
        if !(self.pwm_frame_hz > 0.0) || self.servo_max_us >= 1e6 / self.pwm_frame_hz {
            return Err(Error::Config("servo max pulse must fit inside one PWM frame".into()));
        }
        if !(0.0..1.0).contains(&self.throttle_deadband) {
            return Err(Error::Config("throttle_deadband must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.autopilot_throttle_cap) {
            return Err(Error::Config("autopilot_throttle_cap must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn period_s(&self) -> f64 {
        1.0 / self.rate_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotorDirection {
    Forward,
    Brake,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuationCommand {
    pub servo_pulse_us: f64,
    pub motor_duty: f64,
    pub motor_direction: MotorDirection,
    /// 12-bit on-time register values for a PCA9685-style controller.
    pub servo_counts: u16,
    pub motor_counts: u16,
}

/// Clamps to [-1, 1], mapping NaN to 0.
pub fn clamp_norm(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-1.0, 1.0)
    }
}

pub fn steering_to_pulse(steering_norm: f64, cfg: &LoopConfig) -> f64 {
    let s = clamp_norm(steering_norm);
    if s >= 0.0 {
        cfg.servo_center_us + s * (cfg.servo_max_us - cfg.servo_center_us)
    } else {
        cfg.servo_center_us + s * (cfg.servo_center_us - cfg.servo_min_us)
    }
}

/// Inverse of [`steering_to_pulse`] on the configured range.
pub fn pulse_to_steering(pulse_us: f64, cfg: &LoopConfig) -> f64 {
    let p = pulse_us.clamp(cfg.servo_min_us, cfg.servo_max_us);
    if p >= cfg.servo_center_us {
        (p - cfg.servo_center_us) / (cfg.servo_max_us - cfg.servo_center_us)
    } else {
        (p - cfg.servo_center_us) / (cfg.servo_center_us - cfg.servo_min_us)
    }
}

/// Reverse is disabled: anything at or below the deadband brakes.
pub fn throttle_to_drive(throttle_norm: f64, cfg: &LoopConfig) -> (f64, MotorDirection) {
    let t = clamp_norm(throttle_norm);
    if t > cfg.throttle_deadband {
        (t, MotorDirection::Forward)
    } else {
        (0.0, MotorDirection::Brake)
    }
}

/// `pulse_us / frame_us * 4096`, rounded and saturated to 12 bits.
pub fn pca9685_counts(pulse_us: f64, cfg: &LoopConfig) -> u16 {
    let frame_us = 1e6 / cfg.pwm_frame_hz;
    (pulse_us / frame_us * 4096.0).round().clamp(0.0, 4095.0) as u16
}

pub fn actuate(steering_norm: f64, throttle_norm: f64, cfg: &LoopConfig) -> ActuationCommand {
    let servo_pulse_us = steering_to_pulse(steering_norm, cfg);
    let (motor_duty, motor_direction) = throttle_to_drive(throttle_norm, cfg);
    ActuationCommand {
        servo_pulse_us,
        motor_duty,
        motor_direction,
        servo_counts: pca9685_counts(servo_pulse_us, cfg),
        motor_counts: (motor_duty * 4095.0).round() as u16,
    }
}

impl ActuationCommand {
    /// The normalized `(steering, throttle)` the simulated hardware sees.
    pub fn to_normalized(&self, cfg: &LoopConfig) -> (f64, f64) {
        let throttle = match self.motor_direction {
            MotorDirection::Forward => self.motor_duty,
            MotorDirection::Brake => 0.0,
        };
        (pulse_to_steering(self.servo_pulse_us, cfg), throttle)
    }
}
