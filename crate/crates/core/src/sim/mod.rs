//! Deterministic 2D simulation of the car on a closed track and the synthetic
//! forward camera that produces the network's input frames.

mod camera;
mod track;
mod vehicle;

pub use camera::{render_camera, CameraModel, ImageFrame, RenderStyle, Rgb};
pub use track::{lateral_offset, make_default_track, track_progress, Point, TrackSpec};
pub use vehicle::{ackermann_angles, step_vehicle, wrap_angle, VehicleParams, VehicleState};
