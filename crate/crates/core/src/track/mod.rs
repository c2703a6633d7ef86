//! Racetracks as arc-length parameterized ribbons.
//!
//! A [`Track`] is built from centerline control points carrying left/right
//! half-widths. The control points are joined by a C2 cubic spline (periodic
//! for closed loops), reparameterized by arc length and resampled every
//! ~0.5 m. Curvature and heading come from the spline's analytic
//! derivatives; projection and drivability tests run against the resampled
//! polyline through a uniform grid index.

mod generate;
mod index;
mod spline;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;
use crate::vehicle::VehicleParams;
use index::SegmentGrid;
use spline::CenterlineSpline;

pub use generate::{generate_track, TrackKind, TrackSpec};

/// Target spacing of the resampled centerline.
pub const SAMPLE_SPACING: f64 = 0.5;

pub const DEFAULT_SEGMENTS: usize = 10;

/// Default search margin (beyond the widest half-width) for [`Track::project`].
pub const DEFAULT_PROJECTION_MARGIN: f64 = 50.0;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("cannot read track file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed track file: {0}")]
    Malformed(String),
    #[error("non-increasing arc length at points[{index}]")]
    NonIncreasingArcLength { index: usize },
    #[error("half-width below minimum at {field}: {value} m (must exceed {min} m)")]
    HalfWidthTooSmall { field: String, value: f64, min: f64 },
    #[error("invalid {field}: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("s = {s} m outside [0, {length}] on an open track")]
    OutOfRange { s: f64, length: f64 },
    #[error("point ({x:.3}, {y:.3}) is beyond the projection margin")]
    OutOfBounds { x: f64, y: f64 },
    #[error("unknown track spec '{0}'")]
    UnknownSpec(String),
}

/// One centerline control point with its lateral half-widths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPoint {
    pub point: Vec2,
    pub half_width_left: f64,
    pub half_width_right: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub center: Vec2,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterlineSample {
    pub s: f64,
    pub point: Vec2,
    pub heading: f64,
    /// Signed, positive when turning left.
    pub curvature: f64,
}

/// Frenet coordinates: arc length and signed (left-positive) lateral offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub s: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    id: String,
    closed: bool,
    n_segments: usize,
    control: Vec<ControlPoint>,
    obstacles: Vec<Obstacle>,

    spline: CenterlineSpline,
    centerline: Vec<Vec2>,
    cum_s: Vec<f64>,
    /// Unwrapped heading at each resampled point.
    headings: Vec<f64>,
    half_width_left: Vec<f64>,
    half_width_right: Vec<f64>,
    spacing: f64,
    total_length: f64,
    segment_starts: Vec<f64>,
    max_half_width: f64,
    grid: SegmentGrid,
}

/// On-disk layout: `{"id", "closed", "n_segments", "points": [[x, y, wl, wr]], "obstacles": [[cx, cy, r]]}`.
#[derive(Debug, Serialize, Deserialize)]
struct TrackFile {
    id: String,
    closed: bool,
    n_segments: usize,
    points: Vec<[f64; 4]>,
    #[serde(default)]
    obstacles: Vec<[f64; 3]>,
}

impl Track {
    pub fn new(
        id: impl Into<String>,
        closed: bool,
        n_segments: usize,
        control: Vec<ControlPoint>,
        obstacles: Vec<Obstacle>,
    ) -> Result<Track, TrackError> {
        let min_points = if closed { 3 } else { 2 };
        if control.len() < min_points {
            return Err(TrackError::InvalidField {
                field: "points".into(),
                reason: format!("need at least {min_points} control points, got {}", control.len()),
            });
        }
        if n_segments == 0 {
            return Err(TrackError::InvalidField {
                field: "n_segments".into(),
                reason: "must be positive".into(),
            });
        }
        let min_hw = VehicleParams::default().footprint_width * 0.5;
        for (i, c) in control.iter().enumerate() {
            if !c.point.is_finite() || !c.half_width_left.is_finite() || !c.half_width_right.is_finite() {
                return Err(TrackError::InvalidField {
                    field: format!("points[{i}]"),
                    reason: "non-finite value".into(),
                });
            }
            for (name, v) in [("wl", c.half_width_left), ("wr", c.half_width_right)] {
                if v <= min_hw {
                    return Err(TrackError::HalfWidthTooSmall {
                        field: format!("points[{i}].{name}"),
                        value: v,
                        min: min_hw,
                    });
                }
            }
        }
        let n = control.len();
        let chords = if closed { n } else { n - 1 };
        for k in 0..chords {
            let a = control[k].point;
            let b = control[(k + 1) % n].point;
            if a.distance(b) <= 1e-9 {
                return Err(TrackError::NonIncreasingArcLength { index: (k + 1) % n });
            }
        }
        for (i, o) in obstacles.iter().enumerate() {
            if !(o.radius > 0.0) || !o.center.is_finite() {
                return Err(TrackError::InvalidField {
                    field: format!("obstacles[{i}]"),
                    reason: "radius must be positive and centre finite".into(),
                });
            }
        }

        let pts: Vec<Vec2> = control.iter().map(|c| c.point).collect();
        let spline = CenterlineSpline::new(&pts, closed);
        let total_length = spline.total_length();

        let knot_s = spline.knot_arc_lengths();
        let width_at = |s: f64, left: bool| -> f64 {
            let w = |i: usize| {
                let c = &control[i % n];
                if left {
                    c.half_width_left
                } else {
                    c.half_width_right
                }
            };
            let j = match knot_s.binary_search_by(|v| v.total_cmp(&s)) {
                Ok(j) => return w(j),
                Err(j) => j.clamp(1, knot_s.len() - 1) - 1,
            };
            let f = (s - knot_s[j]) / (knot_s[j + 1] - knot_s[j]);
            w(j) * (1.0 - f) + w(j + 1) * f
        };

        let n_samples = (total_length / SAMPLE_SPACING).ceil().max(2.0) as usize;
        let spacing = total_length / n_samples as f64;
        let count = if closed { n_samples } else { n_samples + 1 };
        let mut centerline = Vec::with_capacity(count);
        let mut cum_s = Vec::with_capacity(count);
        let mut headings = Vec::with_capacity(count);
        let mut hwl = Vec::with_capacity(count);
        let mut hwr = Vec::with_capacity(count);
        let mut prev_heading: Option<f64> = None;
        for k in 0..count {
            let s = if k == n_samples { total_length } else { spacing * k as f64 };
            let sp = spline.eval(spline.u_at(s));
            let mut h = sp.heading();
            if let Some(ph) = prev_heading {
                h = unwrap_near(h, ph);
            }
            prev_heading = Some(h);
            centerline.push(sp.point);
            cum_s.push(s);
            headings.push(h);
            hwl.push(width_at(s, true));
            hwr.push(width_at(s, false));
        }

        let segment_starts: Vec<f64> = (0..n_segments)
            .map(|i| total_length * i as f64 / n_segments as f64)
            .collect();
        let max_half_width = hwl.iter().chain(&hwr).cloned().fold(0.0, f64::max);
        let grid_chords = if closed { count } else { count - 1 };
        let grid = SegmentGrid::build(&centerline, grid_chords);

        Ok(Track {
            id: id.into(),
            closed,
            n_segments,
            control,
            obstacles,
            spline,
            centerline,
            cum_s,
            headings,
            half_width_left: hwl,
            half_width_right: hwr,
            spacing,
            total_length,
            segment_starts,
            max_half_width,
            grid,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Track, TrackError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TrackError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Track::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Track, TrackError> {
        let file: TrackFile = serde_json::from_str(text).map_err(|e| TrackError::Malformed(e.to_string()))?;
        let control = file
            .points
            .iter()
            .map(|&[x, y, wl, wr]| ControlPoint {
                point: Vec2::new(x, y),
                half_width_left: wl,
                half_width_right: wr,
            })
            .collect();
        let obstacles = file
            .obstacles
            .iter()
            .map(|&[cx, cy, r]| Obstacle {
                center: Vec2::new(cx, cy),
                radius: r,
            })
            .collect();
        Track::new(file.id, file.closed, file.n_segments, control, obstacles)
    }

    pub fn to_json(&self) -> String {
        let file = TrackFile {
            id: self.id.clone(),
            closed: self.closed,
            n_segments: self.n_segments,
            points: self
                .control
                .iter()
                .map(|c| [c.point.x, c.point.y, c.half_width_left, c.half_width_right])
                .collect(),
            obstacles: self
                .obstacles
                .iter()
                .map(|o| [o.center.x, o.center.y, o.radius])
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("track serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrackError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| TrackError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Same geometry with a different segment partition.
    pub fn with_segments(&self, n_segments: usize) -> Result<Track, TrackError> {
        Track::new(
            self.id.clone(),
            self.closed,
            n_segments,
            self.control.clone(),
            self.obstacles.clone(),
        )
    }

    pub fn with_obstacles(&self, obstacles: Vec<Obstacle>) -> Result<Track, TrackError> {
        Track::new(self.id.clone(), self.closed, self.n_segments, self.control.clone(), obstacles)
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn is_closed(&self) -> bool {
        self.closed
    }
    pub fn n_segments(&self) -> usize {
        self.n_segments
    }
    pub fn total_length(&self) -> f64 {
        self.total_length
    }
    pub fn segment_starts(&self) -> &[f64] {
        &self.segment_starts
    }
    pub fn centerline(&self) -> &[Vec2] {
        &self.centerline
    }
    pub fn cum_s(&self) -> &[f64] {
        &self.cum_s
    }
    pub fn half_width_left(&self) -> &[f64] {
        &self.half_width_left
    }
    pub fn half_width_right(&self) -> &[f64] {
        &self.half_width_right
    }
    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }
    pub fn control_points(&self) -> &[ControlPoint] {
        &self.control
    }
    pub fn max_half_width(&self) -> f64 {
        self.max_half_width
    }

    /// End of segment `i` (the next start, or the lap length for the last one).
    pub fn segment_end(&self, i: usize) -> f64 {
        self.segment_starts.get(i + 1).copied().unwrap_or(self.total_length)
    }

    /// Arc length wrapped onto `[0, total_length)` for closed tracks.
    pub fn wrap_s(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.total_length)
        } else {
            s
        }
    }

    pub fn sample(&self, s: f64) -> Result<CenterlineSample, TrackError> {
        let s = if self.closed {
            self.wrap_s(s)
        } else if (0.0..=self.total_length).contains(&s) {
            s
        } else {
            return Err(TrackError::OutOfRange {
                s,
                length: self.total_length,
            });
        };
        let sp = self.spline.eval(self.spline.u_at(s));
        let k = ((s / self.spacing) as usize).min(self.headings.len() - 1);
        Ok(CenterlineSample {
            s,
            point: sp.point,
            heading: unwrap_near(sp.heading(), self.headings[k]),
            curvature: sp.curvature(),
        })
    }

    /// Half-widths (left, right) at arc length `s`.
    pub fn half_widths_at(&self, s: f64) -> (f64, f64) {
        let s = self.wrap_s(s).clamp(0.0, self.total_length);
        let n = self.centerline.len();
        let k = ((s / self.spacing) as usize).min(n - 1);
        let f = ((s - self.cum_s[k]) / self.spacing).clamp(0.0, 1.0);
        let next = if k + 1 < n { k + 1 } else if self.closed { 0 } else { k };
        (
            self.half_width_left[k] * (1.0 - f) + self.half_width_left[next] * f,
            self.half_width_right[k] * (1.0 - f) + self.half_width_right[next] * f,
        )
    }

    /// Nearest-point projection, searching up to `margin` beyond the widest half-width.
    pub fn project_within(&self, point: Vec2, margin: f64) -> Result<TrackFrame, TrackError> {
        let coarse = self
            .project_radius(point, self.max_half_width + margin)
            .ok_or(TrackError::OutOfBounds { x: point.x, y: point.y })?;
        Ok(self.refine_projection(point, coarse))
    }

    pub fn project(&self, point: Vec2) -> Result<TrackFrame, TrackError> {
        self.project_within(point, DEFAULT_PROJECTION_MARGIN)
    }

    fn project_radius(&self, point: Vec2, radius: f64) -> Option<TrackFrame> {
        let hit = self.grid.nearest_within(&self.centerline, point, radius)?;
        let n = self.centerline.len();
        let a = self.centerline[hit.chord];
        let b = self.centerline[(hit.chord + 1) % n];
        let dir = b - a;
        let chord_len = dir.norm();
        let mut s = self.cum_s[hit.chord] + hit.t * chord_len;
        if self.closed && s >= self.total_length {
            s -= self.total_length;
        }
        let side = dir.cross(point - a);
        let dist = hit.dist_sq.sqrt();
        let d = if side >= 0.0 { dist } else { -dist };
        Some(TrackFrame { s, d })
    }

    /// Newton on the spline foot point, starting from the chord answer.
    fn refine_projection(&self, point: Vec2, coarse: TrackFrame) -> TrackFrame {
        let u_max = self.spline.u_max();
        let mut u = self.spline.u_at(coarse.s);
        for _ in 0..6 {
            let sp = self.spline.eval(u);
            let r = sp.point - point;
            let g = sp.d1.dot(r);
            let dg = sp.d1.norm_sq() + sp.d2.dot(r);
            if !(dg > 0.0) {
                return coarse;
            }
            let step = g / dg;
            u -= step;
            if self.closed {
                u = u.rem_euclid(u_max);
            } else {
                u = u.clamp(0.0, u_max);
            }
            if step.abs() < 1e-12 * (1.0 + u_max) {
                break;
            }
        }
        let sp = self.spline.eval(u);
        let mut s = self.spline.s_at(u);
        if self.closed && s >= self.total_length {
            s -= self.total_length;
        }
        // accept only if it agrees with the chord answer on the neighbourhood
        let ds = (s - coarse.s).abs();
        let ds = if self.closed { ds.min(self.total_length - ds) } else { ds };
        if ds > 4.0 * self.spacing {
            return coarse;
        }
        let d = sp.d1.cross(point - sp.point) / sp.d1.norm();
        TrackFrame { s, d }
    }

    /// True when the point lies on the road ribbon and outside every obstacle.
    pub fn is_drivable(&self, point: Vec2) -> bool {
        if self.obstacles.iter().any(|o| o.center.distance(point) <= o.radius) {
            return false;
        }
        // any closer centerline point would be within the widest half-width
        match self.project_radius(point, self.max_half_width) {
            Some(f) => {
                let (wl, wr) = self.half_widths_at(f.s);
                f.d <= wl && f.d >= -wr
            }
            None => false,
        }
    }

    pub fn segment_index(&self, s: f64) -> usize {
        let s = self.wrap_s(s);
        self.segment_starts.partition_point(|&start| start <= s).saturating_sub(1)
    }
}

fn unwrap_near(angle: f64, reference: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    angle + tau * ((reference - angle) / tau).round()
}
