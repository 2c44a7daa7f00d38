use serde::{Deserialize, Serialize};

use super::track::TrackSpec;
use super::vehicle::VehicleState;
use crate::{Error, Result};

pub type Rgb = [u8; 3];

/// Row-major RGB frame, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFrame {
    pub width_px: u32,
    pub height_px: u32,
    pub pixels: Vec<u8>,
}

impl ImageFrame {
    pub fn filled(width_px: u32, height_px: u32, color: Rgb) -> Self {
        let n = width_px as usize * height_px as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&color);
        }
        Self {
            width_px,
            height_px,
            pixels,
        }
    }

    pub fn from_pixels(width_px: u32, height_px: u32, pixels: Vec<u8>) -> Result<Self> {
        let expected = width_px as usize * height_px as usize * 3;
        if pixels.len() != expected {
            return Err(Error::Shape(format!(
                "{width_px}x{height_px} RGB frame needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            width_px,
            height_px,
            pixels,
        })
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        let i = (y as usize * self.width_px as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, color: Rgb) {
        let i = (y as usize * self.width_px as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    /// Mirror image about the vertical axis.
    pub fn flip_horizontal(&self) -> ImageFrame {
        let w = self.width_px as usize;
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks_exact(w * 3) {
            for px in row.chunks_exact(3).rev() {
                pixels.extend_from_slice(px);
            }
        }
        ImageFrame {
            width_px: self.width_px,
            height_px: self.height_px,
            pixels,
        }
    }
}

/// Flat colors used by the renderer. Changing them is the hook for color
/// domain randomization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderStyle {
    pub sky: Rgb,
    pub ground: Rgb,
    pub lane: Rgb,
    pub line: Rgb,
    pub line_width_m: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            sky: [170, 200, 230],
            ground: [70, 120, 60],
            lane: [40, 40, 45],
            line: [240, 240, 240],
            line_width_m: 0.05,
        }
    }
}

/// Forward-looking pinhole camera rigidly mounted on the car.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub height_m: f64,
    /// Downward tilt, radians.
    pub pitch_rad: f64,
    pub horizontal_fov_rad: f64,
    pub image_width_px: u32,
    pub image_height_px: u32,
    /// Mounting position ahead of the rear axle.
    #[serde(default = "default_forward_offset")]
    pub forward_offset_m: f64,
    /// Ground farther than this is drawn as plain background.
    #[serde(default = "default_max_range")]
    pub max_range_m: f64,
    #[serde(default)]
    pub style: RenderStyle,
}

fn default_forward_offset() -> f64 {
    0.2
}

fn default_max_range() -> f64 {
    4.0
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            height_m: 0.12,
            pitch_rad: 0.35,
            horizontal_fov_rad: 1.2,
            image_width_px: 160,
            image_height_px: 120,
            forward_offset_m: default_forward_offset(),
            max_range_m: default_max_range(),
            style: RenderStyle::default(),
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.height_m > 0.0 && self.height_m.is_finite()) {
            return Err(Error::Config("camera height_m must be positive".into()));
        }
        if !(self.horizontal_fov_rad > 0.0 && self.horizontal_fov_rad < std::f64::consts::PI) {
            return Err(Error::Config(
                "camera horizontal_fov_rad must lie in (0, pi)".into(),
            ));
        }
        if self.image_width_px == 0 || self.image_height_px == 0 {
            return Err(Error::Config("camera image size must be non-zero".into()));
        }
        if !(self.max_range_m > 0.0) || !self.pitch_rad.is_finite() {
            return Err(Error::Config("camera max_range_m must be positive".into()));
        }
        if !(self.style.line_width_m >= 0.0) {
            return Err(Error::Config("line_width_m must be non-negative".into()));
        }
        Ok(())
    }
}

/// Track segment expressed in the camera's ground frame (forward, left).
#[derive(Clone, Copy)]
struct LocalSegment {
    f0: f64,
    l0: f64,
    df: f64,
    dl: f64,
    len2: f64,
}

impl LocalSegment {
    #[inline]
    fn distance(&self, f: f64, l: f64) -> f64 {
        let t = (((f - self.f0) * self.df + (l - self.l0) * self.dl) / self.len2).clamp(0.0, 1.0);
        let ef = f - (self.f0 + t * self.df);
        let el = l - (self.l0 + t * self.dl);
        ef.hypot(el)
    }
}

/// Uniform grid over the visible ground patch listing the segments that can be
/// within `margin` of each cell.
struct SegmentGrid {
    cell: f64,
    range: f64,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
}

impl SegmentGrid {
    fn build(segments: &[LocalSegment], range: f64, margin: f64) -> Self {
        let cell = 0.1;
        let rows = (range / cell).ceil() as usize + 1;
        let cols = (2.0 * range / cell).ceil() as usize + 1;
        let mut cells = vec![Vec::new(); rows * cols];
        for (i, s) in segments.iter().enumerate() {
            let (f1, l1) = (s.f0 + s.df, s.l0 + s.dl);
            let fmin = s.f0.min(f1) - margin;
            let fmax = s.f0.max(f1) + margin;
            let lmin = s.l0.min(l1) - margin;
            let lmax = s.l0.max(l1) + margin;
            if fmax < 0.0 || fmin > range || lmax < -range || lmin > range {
                continue;
            }
            let r0 = ((fmin.max(0.0)) / cell).floor() as usize;
            let r1 = ((fmax.min(range)) / cell).floor() as usize;
            let c0 = ((lmin.max(-range) + range) / cell).floor() as usize;
            let c1 = ((lmax.min(range) + range) / cell).floor() as usize;
            for r in r0..=r1.min(rows - 1) {
                for c in c0..=c1.min(cols - 1) {
                    cells[r * cols + c].push(i as u32);
                }
            }
        }
        Self {
            cell,
            range,
            cols,
            rows,
            cells,
        }
    }

    #[inline]
    fn candidates(&self, f: f64, l: f64) -> &[u32] {
        let r = (f / self.cell).floor();
        let c = ((l + self.range) / self.cell).floor();
        if r < 0.0 || c < 0.0 {
            return &[];
        }
        let (r, c) = (r as usize, c as usize);
        if r >= self.rows || c >= self.cols {
            return &[];
        }
        &self.cells[r * self.cols + c]
    }
}

/// Renders the camera view of the track from the vehicle pose.
///
/// Each pixel ray is intersected with the ground plane; ground points are
/// colored by their distance to the centerline (lane, boundary line, or
/// background), rays at or above the horizon get the sky color. All geometry is
/// evaluated in the camera's own ground frame so mirrored pixel columns see
/// exactly mirrored coordinates. Output is a pure function of the inputs.
pub fn render_camera(track: &TrackSpec, state: &VehicleState, cam: &CameraModel) -> ImageFrame {
    let style = &cam.style;
    let width = cam.image_width_px;
    let height = cam.image_height_px;
    let mut frame = ImageFrame::filled(width, height, style.sky);

    let (sin_h, cos_h) = state.heading_rad.sin_cos();
    let cam_x = state.x_m + cam.forward_offset_m * cos_h;
    let cam_y = state.y_m + cam.forward_offset_m * sin_h;

    let local: Vec<LocalSegment> = track
        .segments()
        .map(|(a, b)| {
            let (ax, ay) = (a.x - cam_x, a.y - cam_y);
            let (bx, by) = (b.x - cam_x, b.y - cam_y);
            let f0 = ax * cos_h + ay * sin_h;
            let l0 = -ax * sin_h + ay * cos_h;
            let f1 = bx * cos_h + by * sin_h;
            let l1 = -bx * sin_h + by * cos_h;
            let (df, dl) = (f1 - f0, l1 - l0);
            LocalSegment {
                f0,
                l0,
                df,
                dl,
                len2: (df * df + dl * dl).max(f64::MIN_POSITIVE),
            }
        })
        .collect();

    let half_lane = track.lane_width_m / 2.0;
    let half_line = style.line_width_m / 2.0;
    let margin = half_lane + half_line + 1e-6;
    let grid = SegmentGrid::build(&local, cam.max_range_m, margin);

    let focal = (width as f64 / 2.0) / (cam.horizontal_fov_rad / 2.0).tan();
    let (sin_p, cos_p) = cam.pitch_rad.sin_cos();
    let max_range2 = cam.max_range_m * cam.max_range_m;
    let half_w = width as f64 / 2.0;
    let half_h = height as f64 / 2.0;

    for v in 0..height {
        let yc = v as f64 + 0.5 - half_h;
        let down = focal * sin_p + yc * cos_p;
        if down <= 0.0 {
            continue;
        }
        let t = cam.height_m / down;
        let forward = t * (focal * cos_p - yc * sin_p);
        for u in 0..width {
            let xc = u as f64 + 0.5 - half_w;
            let left = -(t * xc);
            let color = if forward * forward + left * left > max_range2 {
                style.ground
            } else {
                let d = grid
                    .candidates(forward, left)
                    .iter()
                    .map(|&i| local[i as usize].distance(forward, left))
                    .fold(f64::INFINITY, f64::min);
                if (d - half_lane).abs() <= half_line {
                    style.line
                } else if d < half_lane {
                    style.lane
                } else {
                    style.ground
                }
            };
            frame.set_pixel(u, v, color);
        }
    }
    frame
}
