//! Procedural circuits: analytic circle/stadium fixtures and seeded
//! stand-ins for the three challenge tracks.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ControlPoint, Track, TrackError, DEFAULT_SEGMENTS};
use crate::geom::Vec2;
use crate::vehicle::VehicleParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackKind {
    Circle,
    Stadium,
    ThruxtonStandin,
    AngleseyStandin,
    VegasStandin,
}

impl TrackKind {
    pub const ALL: [TrackKind; 5] = [
        TrackKind::Circle,
        TrackKind::Stadium,
        TrackKind::ThruxtonStandin,
        TrackKind::AngleseyStandin,
        TrackKind::VegasStandin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrackKind::Circle => "circle",
            TrackKind::Stadium => "stadium",
            TrackKind::ThruxtonStandin => "thruxton_standin",
            TrackKind::AngleseyStandin => "anglesey_standin",
            TrackKind::VegasStandin => "vegas_standin",
        }
    }
}

impl fmt::Display for TrackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrackKind {
    type Err = TrackError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TrackError::UnknownSpec(s.to_string()))
    }
}

/// Stand-in shape parameters: lap length and the band the tightest corner
/// curvature is drawn from.
struct StandinShape {
    length: f64,
    kappa_min: f64,
    kappa_max: f64,
    harmonics: std::ops::RangeInclusive<u32>,
}

impl TrackKind {
    fn standin_shape(self) -> Option<StandinShape> {
        match self {
            TrackKind::ThruxtonStandin => Some(StandinShape {
                length: 3800.0,
                kappa_min: 1.0 / 60.0,
                kappa_max: 1.0 / 45.0,
                harmonics: 2..=7,
            }),
            TrackKind::AngleseyStandin => Some(StandinShape {
                length: 2100.0,
                kappa_min: 1.0 / 55.0,
                kappa_max: 1.0 / 42.0,
                harmonics: 2..=6,
            }),
            TrackKind::VegasStandin => Some(StandinShape {
                length: 2400.0,
                kappa_min: 1.0 / 50.0,
                kappa_max: 1.0 / 40.0,
                harmonics: 2..=6,
            }),
            TrackKind::Circle | TrackKind::Stadium => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSpec {
    pub kind: TrackKind,
    pub half_width_left: f64,
    pub half_width_right: f64,
    /// Circle radius, or the stadium's turn radius.
    pub radius: f64,
    /// Stadium straight length.
    pub straight_length: f64,
    pub n_segments: usize,
}

impl TrackSpec {
    pub fn new(kind: TrackKind) -> Self {
        let (hw, radius, straight) = match kind {
            TrackKind::Circle => (6.0, 200.0, 0.0),
            TrackKind::Stadium => (6.0, 100.0, 300.0),
            TrackKind::ThruxtonStandin => (6.5, 0.0, 0.0),
            TrackKind::AngleseyStandin => (6.0, 0.0, 0.0),
            TrackKind::VegasStandin => (5.5, 0.0, 0.0),
        };
        TrackSpec {
            kind,
            half_width_left: hw,
            half_width_right: hw,
            radius,
            straight_length: straight,
            n_segments: DEFAULT_SEGMENTS,
        }
    }

    pub fn circle(radius: f64, width: f64) -> Self {
        TrackSpec {
            radius,
            half_width_left: width * 0.5,
            half_width_right: width * 0.5,
            ..TrackSpec::new(TrackKind::Circle)
        }
    }
}

/// Build a track from generator parameters. Deterministic in `(spec, seed)`;
/// the circle and stadium ignore the seed.
pub fn generate_track(spec: &TrackSpec, seed: u64) -> Result<Track, TrackError> {
    let min_hw = VehicleParams::default().footprint_width * 0.5;
    for (field, v) in [
        ("half_width_left", spec.half_width_left),
        ("half_width_right", spec.half_width_right),
    ] {
        if !(v > min_hw) {
            return Err(TrackError::HalfWidthTooSmall {
                field: field.into(),
                value: v,
                min: min_hw,
            });
        }
    }
    let outline = match spec.kind {
        TrackKind::Circle => {
            if !(spec.radius > spec.half_width_left.max(spec.half_width_right)) {
                return Err(TrackError::InvalidField {
                    field: "radius".into(),
                    reason: "must exceed the half-width".into(),
                });
            }
            circle_outline(spec.radius)
        }
        TrackKind::Stadium => {
            if !(spec.radius > spec.half_width_left.max(spec.half_width_right)) || spec.straight_length < 0.0 {
                return Err(TrackError::InvalidField {
                    field: "radius".into(),
                    reason: "turn radius must exceed the half-width and straights be non-negative".into(),
                });
            }
            stadium_outline(spec.radius, spec.straight_length)
        }
        kind => {
            let shape = kind.standin_shape().expect("stand-in kinds have a shape");
            standin_outline(&shape, spec.half_width_left.max(spec.half_width_right), seed)
        }
    };
    let control = outline
        .into_iter()
        .map(|p| ControlPoint {
            point: p,
            half_width_left: spec.half_width_left,
            half_width_right: spec.half_width_right,
        })
        .collect();
    Track::new(spec.kind.name(), true, spec.n_segments, control, Vec::new())
}

/// Counter-clockwise circle starting at the bottom, heading +x.
fn circle_outline(radius: f64) -> Vec<Vec2> {
    let n = ((TAU * radius / 10.0).ceil() as usize).max(64);
    (0..n)
        .map(|i| Vec2::from_angle(-PI / 2.0 + TAU * i as f64 / n as f64) * radius)
        .collect()
}

/// Two straights along x joined by semicircles, counter-clockwise, starting
/// mid bottom straight.
fn stadium_outline(radius: f64, straight: f64) -> Vec<Vec2> {
    let half = straight * 0.5;
    let arc_len = PI * radius;
    let perimeter = 2.0 * straight + 2.0 * arc_len;
    let n = ((perimeter / 8.0).ceil() as usize).max(32);
    let step = perimeter / n as f64;
    (0..n)
        .map(|i| {
            let mut s = i as f64 * step;
            // bottom straight right half
            if s < half {
                return Vec2::new(s, -radius);
            }
            s -= half;
            if s < arc_len {
                return Vec2::new(half, 0.0) + Vec2::from_angle(-PI / 2.0 + s / radius) * radius;
            }
            s -= arc_len;
            if s < straight {
                return Vec2::new(half - s, radius);
            }
            s -= straight;
            if s < arc_len {
                return Vec2::new(-half, 0.0) + Vec2::from_angle(PI / 2.0 + s / radius) * radius;
            }
            s -= arc_len;
            Vec2::new(-half + s, -radius)
        })
        .collect()
}

/// Seeded closed loop: a radial sum of harmonics, rescaled to the target lap
/// length, with the harmonic amplitude tuned by bisection so the tightest
/// corner lands on a seeded curvature drawn from the shape's band.
fn standin_outline(shape: &StandinShape, half_width: f64, seed: u64) -> Vec<Vec2> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c32_525f_7261_6365);
    let n_points = (shape.length / 12.0).ceil() as usize;
    for _attempt in 0..64 {
        let terms: Vec<(f64, f64, f64)> = shape
            .harmonics
            .clone()
            .map(|k| {
                let amp = rng.gen_range(0.3..1.0) / (k as f64).powf(1.5);
                let phase = rng.gen_range(0.0..TAU);
                (k as f64, amp, phase)
            })
            .collect();
        let kappa_target = rng.gen_range(shape.kappa_min..shape.kappa_max);

        let build = |scale: f64| -> Option<(Vec<Vec2>, f64)> {
            let raw: Vec<Vec2> = (0..n_points)
                .map(|j| {
                    let theta = -PI / 2.0 + TAU * j as f64 / n_points as f64;
                    let r = 1.0
                        + scale
                            * terms
                                .iter()
                                .map(|&(k, a, ph)| a * (k * (theta + PI / 2.0) + ph).cos())
                                .sum::<f64>();
                    Vec2::from_angle(theta) * r
                })
                .collect();
            if raw.iter().any(|p| p.norm() < 0.35) {
                return None;
            }
            let pts = rescale_to_length(&raw, shape.length);
            let kmax = max_abs_curvature(&pts);
            Some((pts, kmax))
        };

        // amplitude 0 is a circle; find the largest scale under the target
        let (mut lo, mut hi) = (0.0, 1.0);
        match build(hi) {
            Some((_, k)) if k < kappa_target => continue,
            _ => {}
        }
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            match build(mid) {
                Some((_, k)) if k <= kappa_target => lo = mid,
                _ => hi = mid,
            }
        }
        let Some((pts, _)) = build(lo) else { continue };
        if clear_of_itself(&pts, half_width) {
            return pts;
        }
    }
    // Unreachable for the built-in shapes; fall back to a circle of the right length.
    circle_outline(shape.length / TAU)
}

fn rescale_to_length(points: &[Vec2], length: f64) -> Vec<Vec2> {
    let mut pts = points.to_vec();
    for _ in 0..3 {
        let current = super::spline::CenterlineSpline::new(&pts, true).total_length();
        let k = length / current;
        if (k - 1.0).abs() < 1e-12 {
            break;
        }
        pts.iter_mut().for_each(|p| *p = *p * k);
    }
    pts
}

fn max_abs_curvature(points: &[Vec2]) -> f64 {
    let spline = super::spline::CenterlineSpline::new(points, true);
    let total = spline.total_length();
    let n = (total / 2.0) as usize;
    (0..n)
        .map(|i| spline.eval(spline.u_at(total * i as f64 / n as f64)).curvature().abs())
        .fold(0.0, f64::max)
}

/// Parts of the loop more than 150 m apart along the lap must stay well
/// separated laterally.
fn clear_of_itself(points: &[Vec2], half_width: f64) -> bool {
    let spline = super::spline::CenterlineSpline::new(points, true);
    let total = spline.total_length();
    let step = 5.0;
    let n = (total / step) as usize;
    let pts: Vec<Vec2> = (0..n)
        .map(|i| spline.eval(spline.u_at(total * i as f64 / n as f64)).point)
        .collect();
    let min_gap = 4.0 * half_width + 40.0;
    let skip = (150.0 / step) as usize;
    for i in 0..n {
        for j in (i + skip)..n {
            let along = (j - i).min(n - (j - i));
            if along < skip {
                continue;
            }
            if pts[i].distance(pts[j]) < min_gap {
                return false;
            }
        }
    }
    true
}
