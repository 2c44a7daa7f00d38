use crate::sim::{
    lateral_offset, render_camera, step_vehicle, track_progress, CameraModel, ImageFrame,
    TrackSpec, VehicleParams, VehicleState,
};
use crate::Result;

/// The simulated car on its track, plus the camera that looks at it.
#[derive(Debug, Clone)]
pub struct World {
    pub track: TrackSpec,
    pub vehicle: VehicleParams,
    pub camera: CameraModel,
    pub state: VehicleState,
}

impl World {
    /// Validates every part and places the car at rest on the first waypoint.
    pub fn new(track: TrackSpec, vehicle: VehicleParams, camera: CameraModel) -> Result<Self> {
        vehicle.validate()?;
        track.validate_for_vehicle(vehicle.width_m)?;
        camera.validate()?;
        let state = track.start_state();
        Ok(Self {
            track,
            vehicle,
            camera,
            state,
        })
    }

    pub fn render(&self) -> ImageFrame {
        render_camera(&self.track, &self.state, &self.camera)
    }

    pub fn step(&mut self, steering_norm: f64, throttle_norm: f64, dt: f64) -> Result<()> {
        self.state = step_vehicle(&self.state, throttle_norm, steering_norm, dt, &self.vehicle)?;
        Ok(())
    }

    pub fn progress_m(&self) -> Result<f64> {
        track_progress(&self.track, &self.state)
    }

    pub fn lateral_offset_m(&self) -> Result<f64> {
        lateral_offset(&self.track, &self.state)
    }
}
