use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vehicle::VehicleState;
use crate::{Error, Result};

/// A 2D point in the world frame, meters. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Closed-loop course: a centerline polyline with a constant lane width.
///
/// The centerline is stored without repeating the first point; the segment from
/// the last waypoint back to the first closes the loop. Travel direction follows
/// waypoint order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSpec {
    pub lane_width_m: f64,
    pub bounds_m: (f64, f64),
    pub centerline: Vec<Point>,
}

/// Closest point on the centerline to a query position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Projection {
    pub distance: f64,
    /// Signed distance, positive to the left of the travel direction.
    pub signed: f64,
    /// Arc length of the projected point, in [0, perimeter).
    pub arc_length: f64,
}

impl TrackSpec {
    /// Builds a track, dropping a trailing waypoint that repeats the first one.
    pub fn new(centerline: Vec<Point>, lane_width_m: f64, bounds_m: (f64, f64)) -> Self {
        let mut track = Self {
            lane_width_m,
            bounds_m,
            centerline,
        };
        track.normalize();
        track
    }

    fn normalize(&mut self) {
        if self.centerline.len() > 1 {
            let first = self.centerline[0];
            let last = self.centerline[self.centerline.len() - 1];
            if first.distance(last) < 1e-9 {
                self.centerline.pop();
            }
        }
    }

    /// Loads and validates a track JSON document (`{lane_width_m, bounds_m, centerline}`).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut track: TrackSpec = serde_json::from_str(&text)?;
        track.normalize();
        track.validate()?;
        Ok(track)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    /// Checks the structural invariants and reports the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.centerline.len() < 8 {
            return Err(Error::Config(format!(
                "track needs at least 8 waypoints, got {}",
                self.centerline.len()
            )));
        }
        if !(self.lane_width_m.is_finite() && self.lane_width_m > 0.0) {
            return Err(Error::Config(format!(
                "lane_width_m must be positive, got {}",
                self.lane_width_m
            )));
        }
        let (w, h) = self.bounds_m;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Config("bounds_m must be positive".into()));
        }
        for (i, p) in self.centerline.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::Config(format!("waypoint {i} is not finite")));
            }
            if p.x < 0.0 || p.y < 0.0 || p.x > w || p.y > h {
                return Err(Error::Config(format!(
                    "waypoint {i} ({}, {}) lies outside the {w} x {h} m arena",
                    p.x, p.y
                )));
            }
        }
        self.check_segments()?;
        Ok(())
    }

    /// Like [`validate`](Self::validate) but also requires the lane to fit the car.
    pub fn validate_for_vehicle(&self, vehicle_width_m: f64) -> Result<()> {
        self.validate()?;
        if self.lane_width_m <= vehicle_width_m {
            return Err(Error::Config(format!(
                "lane_width_m {} must exceed the vehicle width {vehicle_width_m}",
                self.lane_width_m
            )));
        }
        Ok(())
    }

    fn check_segments(&self) -> Result<()> {
        if self.centerline.len() < 2 {
            return Err(Error::Config("track has no segments".into()));
        }
        for (i, (a, b)) in self.segments().enumerate() {
            if a.distance(b) <= 1e-12 {
                return Err(Error::Config(format!("track segment {i} has zero length")));
            }
        }
        Ok(())
    }

    /// Iterates over closed-loop segments `(start, end)`.
    pub fn segments(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.centerline.len();
        (0..n).map(move |i| (self.centerline[i], self.centerline[(i + 1) % n]))
    }

    pub fn perimeter(&self) -> f64 {
        self.segments().map(|(a, b)| a.distance(b)).sum()
    }

    /// Arc length from the first waypoint to each waypoint.
    pub fn waypoint_arc_lengths(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.centerline.len());
        for (a, b) in self.segments() {
            out.push(acc);
            acc += a.distance(b);
        }
        out
    }

    /// Point and unit tangent at arc length `s` (taken modulo the perimeter).
    pub fn point_at(&self, s: f64) -> (Point, (f64, f64)) {
        let perimeter = self.perimeter();
        let mut remaining = s.rem_euclid(perimeter);
        let mut last = None;
        for (a, b) in self.segments() {
            let len = a.distance(b);
            let dir = ((b.x - a.x) / len, (b.y - a.y) / len);
            if remaining <= len {
                return (
                    Point::new(a.x + dir.0 * remaining, a.y + dir.1 * remaining),
                    dir,
                );
            }
            remaining -= len;
            last = Some((b, dir));
        }
        // Only reachable through rounding at the very end of the loop.
        let (b, dir) = last.expect("track has segments");
        (b, dir)
    }

    /// Pose at the first waypoint, heading along the first segment.
    pub fn start_state(&self) -> VehicleState {
        let (p, dir) = self.point_at(0.0);
        VehicleState::at_rest(p.x, p.y, dir.1.atan2(dir.0))
    }

    pub(crate) fn project(&self, p: Point) -> Result<Projection> {
        self.check_segments()?;
        let mut best: Option<Projection> = None;
        let mut arc_start = 0.0;
        for (a, b) in self.segments() {
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let len = len2.sqrt();
            let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (a.x + t * dx, a.y + t * dy);
            let (ex, ey) = (p.x - qx, p.y - qy);
            let distance = ex.hypot(ey);
            if best.is_none_or(|b| distance < b.distance) {
                let cross = dx * ey - dy * ex;
                let signed = if cross < 0.0 { -distance } else { distance };
                best = Some(Projection {
                    distance,
                    signed,
                    arc_length: arc_start + t * len,
                });
            }
            arc_start += len;
        }
        let mut proj = best.expect("validated track has segments");
        if proj.arc_length >= arc_start {
            proj.arc_length -= arc_start;
        }
        Ok(proj)
    }
}

/// Signed distance from the vehicle to the nearest centerline point, positive to the
/// left of the travel direction.
pub fn lateral_offset(track: &TrackSpec, state: &VehicleState) -> Result<f64> {
    Ok(track.project(Point::new(state.x_m, state.y_m))?.signed)
}

/// Arc length of the nearest centerline point, in [0, perimeter).
pub fn track_progress(track: &TrackSpec, state: &VehicleState) -> Result<f64> {
    Ok(track.project(Point::new(state.x_m, state.y_m))?.arc_length)
}

/// Turtle-style polyline builder for tracks made of straights and circular arcs.
struct Turtle {
    pos: Point,
    heading: f64,
    points: Vec<Point>,
    spacing: f64,
}

impl Turtle {
    fn new(start: Point, heading: f64, spacing: f64) -> Self {
        Self {
            pos: start,
            heading,
            points: vec![start],
            spacing,
        }
    }

    fn straight(&mut self, length: f64) -> &mut Self {
        let steps = (length / self.spacing).ceil().max(1.0) as usize;
        let start = self.pos;
        let (sin_h, cos_h) = self.heading.sin_cos();
        for i in 1..=steps {
            let d = length * i as f64 / steps as f64;
            self.points
                .push(Point::new(start.x + d * cos_h, start.y + d * sin_h));
        }
        self.pos = *self.points.last().unwrap();
        self
    }

    /// Circular arc; positive `angle` turns left.
    fn arc(&mut self, radius: f64, angle: f64) -> &mut Self {
        let steps = (radius * angle.abs() / self.spacing).ceil().max(1.0) as usize;
        let side = angle.signum();
        let (sin_h, cos_h) = self.heading.sin_cos();
        let center = Point::new(
            self.pos.x - side * radius * sin_h,
            self.pos.y + side * radius * cos_h,
        );
        let start_angle = self.heading - side * PI / 2.0;
        for i in 1..=steps {
            let a = start_angle + angle * i as f64 / steps as f64;
            self.points.push(Point::new(
                center.x + radius * a.cos(),
                center.y + radius * a.sin(),
            ));
        }
        self.heading += angle;
        self.pos = *self.points.last().unwrap();
        self
    }
}

/// Default evaluation course: a counter-clockwise rounded rectangle with an inward
/// chicane on the bottom straight, 13.0 m long and centered in a 5 m x 5 m arena.
///
/// The four corners are left turns; the chicane adds two right turns.
pub fn make_default_track() -> TrackSpec {
    const PERIMETER: f64 = 13.0;
    const ARENA: f64 = 5.0;
    const HEIGHT: f64 = 2.8;
    const CORNER_R: f64 = 0.8;
    const CHICANE_R: f64 = 0.6;
    const CHICANE_ANGLE: f64 = 0.7;
    const CHICANE_GAP: f64 = 0.3;
    const SPACING: f64 = 0.05;

    let chicane_span = 4.0 * CHICANE_R * CHICANE_ANGLE.sin() + CHICANE_GAP;
    let chicane_len = 4.0 * CHICANE_R * CHICANE_ANGLE + CHICANE_GAP;
    let side_straight = HEIGHT - 2.0 * CORNER_R;
    let bottom_straight =
        (PERIMETER - 2.0 * side_straight - 2.0 * PI * CORNER_R - (chicane_len - chicane_span)) / 2.0;
    let width = bottom_straight + 2.0 * CORNER_R;
    let lead = (bottom_straight - chicane_span) / 2.0;

    let x0 = (ARENA - width) / 2.0;
    let y0 = (ARENA - HEIGHT) / 2.0;
    let mut t = Turtle::new(Point::new(x0 + CORNER_R, y0), 0.0, SPACING);
    t.straight(lead)
        .arc(CHICANE_R, CHICANE_ANGLE)
        .arc(CHICANE_R, -CHICANE_ANGLE)
        .straight(CHICANE_GAP)
        .arc(CHICANE_R, -CHICANE_ANGLE)
        .arc(CHICANE_R, CHICANE_ANGLE)
        .straight(lead)
        .arc(CORNER_R, PI / 2.0)
        .straight(side_straight)
        .arc(CORNER_R, PI / 2.0)
        .straight(bottom_straight)
        .arc(CORNER_R, PI / 2.0)
        .straight(side_straight)
        .arc(CORNER_R, PI / 2.0);

    TrackSpec::new(t.points, 0.6, (ARENA, ARENA))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_track(side: f64, n_per_side: usize) -> TrackSpec {
        let corners = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)];
        let mut pts = Vec::new();
        for k in 0..4 {
            let (ax, ay) = corners[k];
            let (bx, by) = corners[(k + 1) % 4];
            for i in 0..n_per_side {
                let t = i as f64 / n_per_side as f64;
                pts.push(Point::new(1.0 + ax + t * (bx - ax), 1.0 + ay + t * (by - ay)));
            }
        }
        TrackSpec::new(pts, 0.6, (side + 2.0, side + 2.0))
    }

    #[test]
    fn default_track_meets_arena_constraints() {
        let track = make_default_track();
        track.validate_for_vehicle(0.19).unwrap();
        let perimeter = track.perimeter();
        assert!((12.5..=13.5).contains(&perimeter), "{perimeter}");
        assert!((perimeter - 13.0).abs() < 0.01, "{perimeter}");
        for p in &track.centerline {
            assert!((0.0..=5.0).contains(&p.x) && (0.0..=5.0).contains(&p.y));
        }
    }

    #[test]
    fn default_track_has_left_and_right_curves() {
        let track = make_default_track();
        let n = track.centerline.len();
        let mut turns = Vec::new();
        for i in 0..n {
            let a = track.centerline[i];
            let b = track.centerline[(i + 1) % n];
            let c = track.centerline[(i + 2) % n];
            let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
            let sign = if cross > 1e-9 {
                1
            } else if cross < -1e-9 {
                -1
            } else {
                0
            };
            if sign != 0 && turns.last() != Some(&sign) {
                turns.push(sign);
            }
        }
        let lefts = turns.iter().filter(|&&s| s == 1).count();
        let rights = turns.iter().filter(|&&s| s == -1).count();
        assert!(lefts >= 2 && rights >= 1, "{turns:?}");
    }

    #[test]
    fn offset_on_centerline_is_zero() {
        let track = square_track(3.0, 10);
        let s = VehicleState::at_rest(2.2, 1.0, 0.0);
        assert!(lateral_offset(&track, &s).unwrap().abs() < 1e-9);
    }

    #[test]
    fn offset_left_of_straight_is_positive() {
        let track = square_track(3.0, 10);
        // bottom edge travels +x, so +y is left
        let s = VehicleState::at_rest(2.2, 1.3, 0.0);
        assert!((lateral_offset(&track, &s).unwrap() - 0.3).abs() < 1e-12);
        let s = VehicleState::at_rest(2.2, 0.8, 0.0);
        assert!((lateral_offset(&track, &s).unwrap() + 0.2).abs() < 1e-12);
    }

    #[test]
    fn progress_at_first_and_middle_waypoint() {
        let track = square_track(3.0, 10);
        let start = VehicleState::at_rest(1.0, 1.0, 0.0);
        assert!(track_progress(&track, &start).unwrap().abs() < 1e-12);
        let half = VehicleState::at_rest(4.0, 4.0, 0.0);
        let p = track_progress(&track, &half).unwrap();
        assert!((p - track.perimeter() / 2.0).abs() < 0.3 + 1e-9, "{p}");
    }

    #[test]
    fn degenerate_segment_is_a_config_error() {
        let mut track = square_track(3.0, 3);
        track.centerline.insert(1, track.centerline[1]);
        let s = VehicleState::default();
        assert!(matches!(lateral_offset(&track, &s), Err(Error::Config(_))));
        assert!(matches!(track_progress(&track, &s), Err(Error::Config(_))));
    }

    #[test]
    fn validation_reports_first_violation() {
        let mut track = square_track(3.0, 3);
        track.centerline.truncate(5);
        let err = track.validate().unwrap_err().to_string();
        assert!(err.contains("at least 8 waypoints"), "{err}");

        let mut track = square_track(3.0, 3);
        track.centerline[2].x = 99.0;
        let err = track.validate().unwrap_err().to_string();
        assert!(err.contains("waypoint 2"), "{err}");

        let track = square_track(3.0, 3);
        assert!(track.validate_for_vehicle(0.7).is_err());
    }

    #[test]
    fn json_round_trip_drops_repeated_endpoint() {
        let track = square_track(2.0, 4);
        let mut doc = serde_json::to_value(&track).unwrap();
        let first = doc["centerline"][0].clone();
        doc["centerline"].as_array_mut().unwrap().push(first);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.json");
        std::fs::write(&path, doc.to_string()).unwrap();
        let loaded = TrackSpec::load(&path).unwrap();
        assert_eq!(loaded, track);
    }
}
