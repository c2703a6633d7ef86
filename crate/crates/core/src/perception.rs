//! Raster boundary extraction, cubic edge fits and local track limits.
//!
//! The camera surrogate is already top-down, so ground-plane projection is
//! the affine cell-to-metre map of [`CameraCalibration`].

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{CameraCalibration, Raster};
use crate::geom::Vec2;

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("raster is {got_w}x{got_h}, calibration expects {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("no drivable cells in view")]
    EmptyScene,
    #[error("need at least one point to fit, got none")]
    NoPoints,
    #[error("boundaries cross at x = {x} m")]
    Crossing { x: f64 },
    #[error("boundaries share no range of at least {step} m")]
    NoOverlap { step: f64 },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// `y(x) = c0 + c1 x + c2 x² + c3 x³` in the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPolynomial {
    pub side: Side,
    pub coefficients: [f64; 4],
    pub x_min: f64,
    pub x_max: f64,
    pub residual_rms: f64,
    /// Fitted degree; below 3 when there were too few distinct x values.
    pub degree: usize,
}

impl BoundaryPolynomial {
    pub fn degraded(&self) -> bool {
        self.degree < 3
    }

    pub fn eval(&self, x: f64) -> f64 {
        let c = &self.coefficients;
        c[0] + x * (c[1] + x * (c[2] + x * c[3]))
    }

    pub fn mirrored(&self) -> BoundaryPolynomial {
        BoundaryPolynomial {
            side: match self.side {
                Side::Left => Side::Right,
                Side::Right => Side::Left,
            },
            coefficients: self.coefficients.map(|c| -c),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitSample {
    pub x: f64,
    pub y_left: f64,
    pub y_right: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackLimits {
    pub samples: Vec<LimitSample>,
    pub residual_left: f64,
    pub residual_right: f64,
}

impl TrackLimits {
    pub fn step(&self) -> f64 {
        match self.samples.as_slice() {
            [a, b, ..] => b.x - a.x,
            _ => 0.0,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.x)
    }

    pub fn mirrored(&self) -> TrackLimits {
        TrackLimits {
            samples: self
                .samples
                .iter()
                .map(|s| LimitSample {
                    x: s.x,
                    y_left: -s.y_right,
                    y_right: -s.y_left,
                })
                .collect(),
            residual_left: self.residual_right,
            residual_right: self.residual_left,
        }
    }

    /// Midline offset at `x` by linear interpolation, clamped to the range.
    pub fn midline_at(&self, x: f64) -> f64 {
        let (l, r) = self.interpolate(x);
        0.5 * (l + r)
    }

    pub fn interpolate(&self, x: f64) -> (f64, f64) {
        let s = &self.samples;
        if s.is_empty() {
            return (0.0, 0.0);
        }
        if x <= s[0].x {
            return (s[0].y_left, s[0].y_right);
        }
        let i = s.partition_point(|p| p.x <= x);
        if i >= s.len() {
            let last = s[s.len() - 1];
            return (last.y_left, last.y_right);
        }
        let (a, b) = (s[i - 1], s[i]);
        let f = (x - a.x) / (b.x - a.x);
        (a.y_left + f * (b.y_left - a.y_left), a.y_right + f * (b.y_right - a.y_right))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,y_left,y_right")?;
        for s in &self.samples {
            writeln!(w, "{},{},{}", s.x, s.y_left, s.y_right)?;
        }
        Ok(())
    }
}

/// Boundary points of the drivable band, per raster row, in the vehicle frame.
///
/// Each row keeps the drivable run that contains the center column (or the
/// nearest run). An edge contributes a point only where the neighbouring
/// cell is inside the raster and not drivable; the point sits on the cell
/// edge between the two.
pub fn extract_boundary_points(
    raster: &Raster,
    calib: &CameraCalibration,
) -> Result<(Vec<Vec2>, Vec<Vec2>), PerceptionError> {
    if raster.width != calib.width || raster.height != calib.height {
        return Err(PerceptionError::DimensionMismatch {
            got_w: raster.width,
            got_h: raster.height,
            want_w: calib.width,
            want_h: calib.height,
        });
    }
    if raster.count_drivable() == 0 {
        return Err(PerceptionError::EmptyScene);
    }
    let w = raster.width;
    let center = (w as f64 - 1.0) * 0.5;
    let half = 0.5 * calib.resolution;
    let mut left = Vec::new();
    let mut right = Vec::new();
    for r in 0..raster.height {
        let row = raster.row(r);
        let Some((a, b)) = central_run(row, center) else { continue };
        if a > 0 {
            let p = calib.cell_in_view(r, a) + Vec2::new(0.0, half);
            left.push(calib.view_to_vehicle(p));
        }
        if b + 1 < w {
            let p = calib.cell_in_view(r, b) - Vec2::new(0.0, half);
            right.push(calib.view_to_vehicle(p));
        }
    }
    Ok((left, right))
}

/// Inclusive column range of the drivable run nearest `center`.
fn central_run(row: &[u8], center: f64) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    let mut c = 0;
    while c < row.len() {
        if row[c] == 0 {
            c += 1;
            continue;
        }
        let start = c;
        while c < row.len() && row[c] != 0 {
            c += 1;
        }
        let end = c - 1;
        let gap = if (start as f64) > center {
            start as f64 - center
        } else if (end as f64) < center {
            center - end as f64
        } else {
            0.0
        };
        if best.is_none_or(|(_, g)| gap < g) {
            best = Some(((start, end), gap));
        }
    }
    best.map(|(run, _)| run)
}

/// Least-squares cubic `y(x)` through `points`, uniform weights.
///
/// With fewer than four distinct x values the degree drops to what the data
/// supports and [`BoundaryPolynomial::degraded`] reports it.
pub fn fit_cubic(side: Side, points: &[Vec2]) -> Result<BoundaryPolynomial, PerceptionError> {
    if points.is_empty() {
        return Err(PerceptionError::NoPoints);
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    let degree = (xs.len() - 1).min(3);
    let x_min = xs[0];
    let x_max = xs[xs.len() - 1];

    // fit in t = (x - mid) / half for conditioning, then expand back to x
    let mid = 0.5 * (x_min + x_max);
    let half = if x_max > x_min { 0.5 * (x_max - x_min) } else { 1.0 };
    let k = degree + 1;
    let mut ata = [[0.0; 4]; 4];
    let mut aty = [0.0; 4];
    for p in points {
        let t = (p.x - mid) / half;
        let mut basis = [1.0; 4];
        for j in 1..k {
            basis[j] = basis[j - 1] * t;
        }
        for i in 0..k {
            aty[i] += basis[i] * p.y;
            for j in 0..k {
                ata[i][j] += basis[i] * basis[j];
            }
        }
    }
    let a = solve_small(ata, aty, k);

    // y = Σ a_j ((x - mid)/half)^j
    let mut coefficients = [0.0; 4];
    for (j, &aj) in a.iter().enumerate().take(k) {
        let scale = aj / half.powi(j as i32);
        // (x - mid)^j = Σ_i C(j,i) x^i (-mid)^(j-i)
        for i in 0..=j {
            coefficients[i] += scale * binomial(j, i) * (-mid).powi((j - i) as i32);
        }
    }
    let mut fit = BoundaryPolynomial {
        side,
        coefficients,
        x_min,
        x_max,
        residual_rms: 0.0,
        degree,
    };
    let ss: f64 = points.iter().map(|p| (fit.eval(p.x) - p.y).powi(2)).sum();
    fit.residual_rms = (ss / points.len() as f64).sqrt();
    Ok(fit)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Gaussian elimination with partial pivoting on the leading `k`×`k` block.
fn solve_small(mut m: [[f64; 4]; 4], mut b: [f64; 4], k: usize) -> [f64; 4] {
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        b.swap(col, piv);
        let d = m[col][col];
        if d.abs() < 1e-300 {
            continue;
        }
        for row in col + 1..k {
            let f = m[row][col] / d;
            for c in col..k {
                m[row][c] -= f * m[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..k).rev() {
        let mut acc = b[row];
        for c in row + 1..k {
            acc -= m[row][c] * x[c];
        }
        x[row] = if m[row][row].abs() < 1e-300 { 0.0 } else { acc / m[row][row] };
    }
    x
}

/// Sample both edges at `x = 0, step, ...` up to the shared range or `horizon`.
pub fn track_limits(
    left: &BoundaryPolynomial,
    right: &BoundaryPolynomial,
    step: f64,
    horizon: f64,
) -> Result<TrackLimits, PerceptionError> {
    let lo = left.x_min.max(right.x_min);
    let hi = left.x_max.min(right.x_max).min(horizon);
    if !(step > 0.0) || hi - lo < step || hi < step {
        return Err(PerceptionError::NoOverlap { step });
    }
    let n = (hi / step + 1e-9).floor() as usize;
    let mut samples = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let x = i as f64 * step;
        let (yl, yr) = (left.eval(x), right.eval(x));
        if !(yl > yr) {
            return Err(PerceptionError::Crossing { x });
        }
        samples.push(LimitSample {
            x,
            y_left: yl,
            y_right: yr,
        });
    }
    Ok(TrackLimits {
        samples,
        residual_left: left.residual_rms,
        residual_right: right.residual_rms,
    })
}

/// Curvature of a cubic refit of the midline at every sample.
pub fn centerline_curvature(limits: &TrackLimits) -> Result<Vec<(f64, f64)>, PerceptionError> {
    if limits.samples.len() < 5 {
        return Err(PerceptionError::TooFewSamples {
            need: 5,
            got: limits.samples.len(),
        });
    }
    let mid: Vec<Vec2> = limits
        .samples
        .iter()
        .map(|s| Vec2::new(s.x, 0.5 * (s.y_left + s.y_right)))
        .collect();
    let fit = fit_cubic(Side::Left, &mid)?;
    let c = fit.coefficients;
    Ok(limits
        .samples
        .iter()
        .map(|s| {
            let x = s.x;
            let d1 = c[1] + x * (2.0 * c[2] + 3.0 * c[3] * x);
            let d2 = 2.0 * c[2] + 6.0 * c[3] * x;
            (x, d2 / (1.0 + d1 * d1).powf(1.5))
        })
        .collect())
}

/// Front-camera pipeline: extract, fit both edges, sample the limits.
pub fn perceive(
    raster: &Raster,
    calib: &CameraCalibration,
    step: f64,
    horizon: f64,
) -> Result<TrackLimits, PerceptionError> {
    let (l, r) = extract_boundary_points(raster, calib)?;
    let left = fit_cubic(Side::Left, &l)?;
    let right = fit_cubic(Side::Right, &r)?;
    track_limits(&left, &right, step, horizon)
}
