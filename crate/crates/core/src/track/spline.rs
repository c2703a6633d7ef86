//! Chord-length parameterized C2 cubic splines through centerline control
//! points, with an arc-length table for `s -> u` inversion.

use crate::geom::Vec2;

/// 5-point Gauss-Legendre nodes/weights on [-1, 1].
const GL_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
    0.236_926_885_056_189_1,
];

/// Sub-intervals per spline piece in the arc-length table.
const ARC_SUBDIV: usize = 16;

/// Piecewise cubic `a + b t + c t² + d t³`, `t = u - knot[i]`.
#[derive(Debug, Clone, PartialEq)]
struct Cubic1D {
    coef: Vec<[f64; 4]>,
}

impl Cubic1D {
    /// `values[i]` at `knots[i]`; for periodic splines `values.last() == values[0]`.
    fn fit(knots: &[f64], values: &[f64], periodic: bool) -> Self {
        let n = knots.len() - 1; // intervals
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let slope: Vec<f64> = (0..n).map(|i| (values[i + 1] - values[i]) / h[i]).collect();

        // second derivatives at knots
        let m: Vec<f64> = if periodic {
            let mut sub = vec![0.0; n];
            let mut diag = vec![0.0; n];
            let mut sup = vec![0.0; n];
            let mut rhs = vec![0.0; n];
            for i in 0..n {
                let hp = h[(i + n - 1) % n];
                let hi = h[i];
                sub[i] = hp;
                diag[i] = 2.0 * (hp + hi);
                sup[i] = hi;
                rhs[i] = 6.0 * (slope[i] - slope[(i + n - 1) % n]);
            }
            let mut m = solve_cyclic(&sub, &diag, &sup, &rhs);
            m.push(m[0]);
            m
        } else if n == 1 {
            vec![0.0, 0.0]
        } else {
            // natural: interior unknowns 1..n-1
            let k = n - 1;
            let mut sub = vec![0.0; k];
            let mut diag = vec![0.0; k];
            let mut sup = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for j in 0..k {
                let i = j + 1;
                sub[j] = h[i - 1];
                diag[j] = 2.0 * (h[i - 1] + h[i]);
                sup[j] = h[i];
                rhs[j] = 6.0 * (slope[i] - slope[i - 1]);
            }
            let inner = solve_tridiagonal(&sub, &diag, &sup, &rhs);
            let mut m = Vec::with_capacity(n + 1);
            m.push(0.0);
            m.extend(inner);
            m.push(0.0);
            m
        };

        let coef = (0..n)
            .map(|i| {
                let a = values[i];
                let b = slope[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0;
                let c = m[i] / 2.0;
                let d = (m[i + 1] - m[i]) / (6.0 * h[i]);
                [a, b, c, d]
            })
            .collect();
        Cubic1D { coef }
    }

    #[inline]
    fn eval(&self, piece: usize, t: f64) -> (f64, f64, f64) {
        let [a, b, c, d] = self.coef[piece];
        (
            a + t * (b + t * (c + t * d)),
            b + t * (2.0 * c + 3.0 * t * d),
            2.0 * c + 6.0 * d * t,
        )
    }
}

/// Thomas algorithm. `sub[0]` and `sup[n-1]` are ignored.
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / denom;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Cyclic tridiagonal system via Sherman-Morrison. `sub[0]` is the
/// top-right corner and `sup[n-1]` the bottom-left corner.
fn solve_cyclic(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let beta = sub[0];
    let alpha = sup[n - 1];
    let gamma = -diag[0];
    let mut bb = diag.to_vec();
    bb[0] -= gamma;
    bb[n - 1] -= alpha * beta / gamma;
    let x = solve_tridiagonal(sub, &bb, sup, rhs);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = alpha;
    let z = solve_tridiagonal(sub, &bb, sup, &u);
    let fact = (x[0] + beta * x[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
    x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect()
}

/// Point and derivatives of the centerline at a spline parameter.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplinePoint {
    pub point: Vec2,
    pub d1: Vec2,
    pub d2: Vec2,
}

impl SplinePoint {
    pub fn heading(&self) -> f64 {
        self.d1.y.atan2(self.d1.x)
    }

    pub fn curvature(&self) -> f64 {
        let speed = self.d1.norm();
        self.d1.cross(self.d2) / (speed * speed * speed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CenterlineSpline {
    knots: Vec<f64>,
    xs: Cubic1D,
    ys: Cubic1D,
    /// (u, s) at every arc-table breakpoint, ascending.
    arc_u: Vec<f64>,
    arc_s: Vec<f64>,
}

impl CenterlineSpline {
    /// Fit through `points`; a closed spline joins the last point back to
    /// the first. Consecutive points must be distinct.
    pub fn new(points: &[Vec2], closed: bool) -> Self {
        let mut pts = points.to_vec();
        if closed {
            pts.push(points[0]);
        }
        let mut knots = Vec::with_capacity(pts.len());
        knots.push(0.0);
        for w in pts.windows(2) {
            let last = *knots.last().unwrap();
            knots.push(last + w[0].distance(w[1]));
        }
        let xv: Vec<f64> = pts.iter().map(|p| p.x).collect();
        let yv: Vec<f64> = pts.iter().map(|p| p.y).collect();
        let xs = Cubic1D::fit(&knots, &xv, closed);
        let ys = Cubic1D::fit(&knots, &yv, closed);

        let mut spline = CenterlineSpline {
            knots,
            xs,
            ys,
            arc_u: Vec::new(),
            arc_s: Vec::new(),
        };
        spline.build_arc_table();
        spline
    }

    fn build_arc_table(&mut self) {
        let pieces = self.knots.len() - 1;
        let mut arc_u = Vec::with_capacity(pieces * ARC_SUBDIV + 1);
        let mut arc_s = Vec::with_capacity(pieces * ARC_SUBDIV + 1);
        let mut s = 0.0;
        arc_u.push(self.knots[0]);
        arc_s.push(0.0);
        for i in 0..pieces {
            let (u0, u1) = (self.knots[i], self.knots[i + 1]);
            let step = (u1 - u0) / ARC_SUBDIV as f64;
            for j in 0..ARC_SUBDIV {
                let a = u0 + step * j as f64;
                let b = if j + 1 == ARC_SUBDIV { u1 } else { a + step };
                s += self.speed_integral(i, a, b);
                arc_u.push(b);
                arc_s.push(s);
            }
        }
        self.arc_u = arc_u;
        self.arc_s = arc_s;
    }

    /// Arc length at each knot (one per fitted point, plus the closing knot).
    pub fn knot_arc_lengths(&self) -> Vec<f64> {
        self.arc_s.iter().step_by(ARC_SUBDIV).copied().collect()
    }

    pub fn total_length(&self) -> f64 {
        *self.arc_s.last().unwrap()
    }

    fn piece_of(&self, u: f64) -> usize {
        let n = self.knots.len() - 1;
        match self.knots.binary_search_by(|k| k.total_cmp(&u)) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    /// Integral of `|r'(u)|` over `[a, b]` inside one piece.
    fn speed_integral(&self, piece: usize, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let u0 = self.knots[piece];
        GL_NODES
            .iter()
            .zip(GL_WEIGHTS)
            .map(|(&xi, w)| {
                let t = mid + half * xi - u0;
                let (_, dx, _) = self.xs.eval(piece, t);
                let (_, dy, _) = self.ys.eval(piece, t);
                w * dx.hypot(dy)
            })
            .sum::<f64>()
            * half
    }

    pub fn eval(&self, u: f64) -> SplinePoint {
        let piece = self.piece_of(u);
        let t = u - self.knots[piece];
        let (x, dx, ddx) = self.xs.eval(piece, t);
        let (y, dy, ddy) = self.ys.eval(piece, t);
        SplinePoint {
            point: Vec2::new(x, y),
            d1: Vec2::new(dx, dy),
            d2: Vec2::new(ddx, ddy),
        }
    }

    /// Parameter range end.
    pub fn u_max(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Arc length from the start to parameter `u`.
    pub fn s_at(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, self.u_max());
        let j = match self.arc_u.binary_search_by(|v| v.total_cmp(&u)) {
            Ok(j) => return self.arc_s[j],
            Err(j) => j.clamp(1, self.arc_u.len() - 1) - 1,
        };
        let ua = self.arc_u[j];
        let piece = self.piece_of(0.5 * (ua + self.arc_u[j + 1]));
        self.arc_s[j] + self.speed_integral(piece, ua, u)
    }

    /// Spline parameter at arc length `s ∈ [0, total_length]`.
    pub fn u_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.total_length());
        let j = match self.arc_s.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(j) => return self.arc_u[j],
            Err(j) => j.clamp(1, self.arc_s.len() - 1) - 1,
        };
        let (ua, ub) = (self.arc_u[j], self.arc_u[j + 1]);
        let (sa, sb) = (self.arc_s[j], self.arc_s[j + 1]);
        let piece = self.piece_of(0.5 * (ua + ub));
        let mut u = ua + (ub - ua) * (s - sa) / (sb - sa);
        for _ in 0..8 {
            let f = sa + self.speed_integral(piece, ua, u) - s;
            let sp = self.eval(u).d1.norm();
            let next = (u - f / sp).clamp(ua, ub);
            let done = (next - u).abs() < 1e-13 * (1.0 + u.abs());
            u = next;
            if done {
                break;
            }
        }
        u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn circle(r: f64, n: usize) -> Vec<Vec2> {
        (0..n)
            .map(|i| Vec2::from_angle(TAU * i as f64 / n as f64) * r)
            .collect()
    }

    #[test]
    fn cyclic_solver_matches_dense_check() {
        let sub = [1.0, 2.0, 0.5, 1.5];
        let diag = [6.0, 7.0, 5.0, 8.0];
        let sup = [0.7, 1.1, 2.0, 0.3];
        let rhs = [1.0, -2.0, 3.0, 0.5];
        let x = solve_cyclic(&sub, &diag, &sup, &rhs);
        let n = 4;
        for i in 0..n {
            let lhs = sub[i] * x[(i + n - 1) % n] + diag[i] * x[i] + sup[i] * x[(i + 1) % n];
            assert!((lhs - rhs[i]).abs() < 1e-12, "row {i}: {lhs} vs {}", rhs[i]);
        }
    }

    #[test]
    fn closed_circle_length_and_curvature() {
        let sp = CenterlineSpline::new(&circle(200.0, 96), true);
        let expected = TAU * 200.0;
        assert!((sp.total_length() - expected).abs() / expected < 1e-4);
        for k in 0..50 {
            let u = sp.u_at(sp.total_length() * k as f64 / 50.0);
            assert!((sp.eval(u).curvature() - 0.005).abs() < 1e-5);
        }
    }

    #[test]
    fn straight_open_spline_is_exact() {
        let pts: Vec<Vec2> = (0..5).map(|i| Vec2::new(10.0 * i as f64, 0.0)).collect();
        let sp = CenterlineSpline::new(&pts, false);
        assert!((sp.total_length() - 40.0).abs() < 1e-12);
        let p = sp.eval(sp.u_at(17.0));
        assert!((p.point.x - 17.0).abs() < 1e-9);
        assert_eq!(p.curvature(), 0.0);
    }

    #[test]
    fn u_at_inverts_arc_length() {
        let pts = [
            Vec2::new(0.0, 0.0),
            Vec2::new(30.0, 5.0),
            Vec2::new(55.0, 30.0),
            Vec2::new(60.0, 70.0),
        ];
        let sp = CenterlineSpline::new(&pts, false);
        // compare against brute-force polyline length at fine resolution
        let n = 200_000;
        let mut s = 0.0;
        let mut prev = sp.eval(0.0).point;
        let u_end = *sp.knots.last().unwrap();
        for i in 1..=n {
            let cur = sp.eval(u_end * i as f64 / n as f64).point;
            s += prev.distance(cur);
            prev = cur;
        }
        assert!((s - sp.total_length()).abs() < 1e-5);
        let target = 0.37 * sp.total_length();
        let u = sp.u_at(target);
        let piece_sum: f64 = {
            let m = 100_000;
            let mut acc = 0.0;
            let mut prev = sp.eval(0.0).point;
            for i in 1..=m {
                let cur = sp.eval(u * i as f64 / m as f64).point;
                acc += prev.distance(cur);
                prev = cur;
            }
            acc
        };
        assert!((piece_sum - target).abs() < 1e-4);
    }
}
