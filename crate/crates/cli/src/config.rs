use std::path::{Path, PathBuf};

use pilotstack_core::drive::LoopConfig;
use pilotstack_core::nn::{ModelSpec, TrainerConfig};
use pilotstack_core::sim::{make_default_track, CameraModel, TrackSpec, VehicleParams};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetrySettings {
    /// Falls back to `PILOTSTACK_BIND`, then 127.0.0.1:8887.
    pub bind: Option<String>,
    pub stream_rate_hz: f64,
    pub jpeg_quality: u8,
    pub ui_dir: Option<PathBuf>,
}

impl Default for TelemetrySettings {
    fn default() -> Self {
        Self {
            bind: None,
            stream_rate_hz: 10.0,
            jpeg_quality: 70,
            ui_dir: None,
        }
    }
}

/// Everything a subcommand needs; defaults, then the JSON config file, then flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub vehicle: VehicleParams,
    pub camera: CameraModel,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub trainer: TrainerConfig,
    pub telemetry: TelemetrySettings,
    /// Model architecture JSON; the built-in five-conv network when absent.
    pub model: Option<PathBuf>,
    /// Track JSON; the built-in 13 m course when absent.
    pub track: Option<PathBuf>,
    pub tub: Option<PathBuf>,
    pub seed: u64,
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))
    }

    /// Checks every section and referenced file, reporting the first problem.
    pub fn validate(&self) -> Result<(), CliError> {
        self.vehicle.validate().map_err(CliError::config)?;
        self.camera.validate().map_err(CliError::config)?;
        self.loop_cfg.validate().map_err(CliError::config)?;
        self.trainer.validate().map_err(CliError::config)?;
        self.track()?
            .validate_for_vehicle(self.vehicle.width_m)
            .map_err(CliError::config)?;
        self.model_spec()?;
        if let Some(dir) = &self.telemetry.ui_dir {
            if !dir.is_dir() {
                return Err(CliError::config(format!("ui directory not found: {}", dir.display())));
            }
        }
        Ok(())
    }

    pub fn track(&self) -> Result<TrackSpec, CliError> {
        match &self.track {
            None => Ok(make_default_track()),
            Some(path) => {
                if !path.exists() {
                    return Err(CliError::config(format!("track file not found: {}", path.display())));
                }
                TrackSpec::load(path).map_err(CliError::config)
            }
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let spec = match &self.model {
            None => ModelSpec::default(),
            Some(path) => {
                if !path.exists() {
                    return Err(CliError::config(format!("model file not found: {}", path.display())));
                }
                ModelSpec::load(path).map_err(CliError::config)?
            }
        };
        spec.validate().map_err(CliError::config)?;
        Ok(spec)
    }

    pub fn bind_address(&self) -> String {
        self.telemetry
            .bind
            .clone()
            .or_else(|| std::env::var(pilotstack_telemetry::BIND_ENV).ok())
            .unwrap_or_else(|| pilotstack_telemetry::DEFAULT_BIND.to_string())
    }

    /// Autopilot cap in m/s, expressed as the normalized throttle cap.
    pub fn set_speed_cap(&mut self, speed_mps: f64) -> Result<(), CliError> {
        if !(speed_mps > 0.0) {
            return Err(CliError::config(format!("speed cap {speed_mps} must be positive")));
        }
        self.loop_cfg.autopilot_throttle_cap = (speed_mps / self.vehicle.max_speed_mps).min(1.0);
        Ok(())
    }

    pub fn echo(&self) {
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        eprintln!("effective config:\n{json}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        AppConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 9, "loop": {"rate_hz": 25}}"#).unwrap();
        let cfg = AppConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.loop_cfg.rate_hz, 25.0);
        assert_eq!(cfg.loop_cfg.servo_center_us, 1500.0);
        assert_eq!(cfg.trainer.epochs, 100);
    }

    #[test]
    fn unknown_keys_and_missing_track_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"sede": 9}"#).unwrap();
        assert_eq!(AppConfig::load(Some(&path)).unwrap_err().code(), 2);
        let cfg = AppConfig {
            track: Some(dir.path().join("nope.json")),
            ..AppConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.code(), 2);
        assert!(err.to_string().contains("nope.json"));
    }

    #[test]
    fn speed_cap_is_normalized() {
        let mut cfg = AppConfig::default();
        cfg.set_speed_cap(0.72).unwrap();
        assert!((cfg.loop_cfg.autopilot_throttle_cap - 0.36).abs() < 1e-12);
    }
}
