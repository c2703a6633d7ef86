//! Built-in policies: curvature speed profiling, the corridor MPC, pure
//! pursuit and trivial baselines.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{CameraCalibration, CameraView, Observation};
use crate::geom::Vec2;
use crate::perception::{self, PerceptionError, TrackLimits};
use crate::vehicle::{action_for, Action, VehicleParams, VehicleState};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("empty curvature profile")]
    EmptyProfile,
    #[error("invalid planner parameter {0}")]
    InvalidParams(&'static str),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

/// Session mode announced to agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Practice,
    Evaluate,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Practice => "practice",
            Mode::Evaluate => "evaluate",
        }
    }
}

/// The select-action contract.
pub trait Agent: Send {
    fn name(&self) -> &str;

    fn cameras(&self) -> Vec<CameraView> {
        vec![CameraView::Front]
    }

    fn begin_run(&mut self, _mode: Mode) {}

    /// Called before the first observation of every episode.
    fn reset(&mut self) {}

    fn act(&mut self, obs: &Observation) -> Action;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Straight,
    Sweeper,
    Hairpin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZonePreset {
    pub a_lat_max: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcParams {
    pub horizon: usize,
    /// m
    pub ds: f64,
    pub a_lat_max: f64,
    pub v_corner_min: f64,
    pub a_accel_max: f64,
    pub a_brake_max: f64,
    pub v_max: f64,
    /// Clearance kept between the footprint side and the track limit.
    pub margin: f64,
    pub kappa_floor: f64,
    /// Weight pulling the path toward the midline.
    pub center_weight: f64,
    pub straight_below: f64,
    pub hairpin_above: f64,
    pub presets: BTreeMap<Zone, ZonePreset>,
    pub wheelbase: f64,
    pub half_width: f64,
    pub max_steer: f64,
    /// Forward reach of the perception raster.
    pub perception_horizon: f64,
}

impl Default for MpcParams {
    fn default() -> Self {
        MpcParams::from_vehicle(&VehicleParams::default())
    }
}

impl MpcParams {
    pub fn from_vehicle(p: &VehicleParams) -> Self {
        let presets = BTreeMap::from([(
            Zone::Hairpin,
            ZonePreset {
                a_lat_max: 1.8,
                margin: 1.0,
            },
        )]);
        MpcParams {
            horizon: 30,
            ds: 1.0,
            a_lat_max: 2.0,
            v_corner_min: 10.0,
            a_accel_max: p.max_accel,
            a_brake_max: p.max_brake,
            v_max: p.max_speed,
            margin: 0.8,
            kappa_floor: 1e-4,
            center_weight: 1e-4,
            straight_below: 0.004,
            hairpin_above: 0.025,
            presets,
            wheelbase: p.wheelbase,
            half_width: p.footprint_width * 0.5,
            max_steer: p.max_steer,
            perception_horizon: 32.0,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let positive = [
            (self.ds, "ds"),
            (self.a_lat_max, "a_lat_max"),
            (self.v_corner_min, "v_corner_min"),
            (self.a_accel_max, "a_accel_max"),
            (self.a_brake_max, "a_brake_max"),
            (self.v_max, "v_max"),
            (self.margin, "margin"),
            (self.kappa_floor, "kappa_floor"),
            (self.center_weight, "center_weight"),
            (self.wheelbase, "wheelbase"),
            (self.max_steer, "max_steer"),
        ];
        for (v, name) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AgentError::InvalidParams(name));
            }
        }
        if self.horizon < 2 {
            return Err(AgentError::InvalidParams("horizon"));
        }
        if self.ds * self.horizon as f64 > self.perception_horizon {
            return Err(AgentError::InvalidParams("horizon"));
        }
        if !(self.straight_below < self.hairpin_above) {
            return Err(AgentError::InvalidParams("zone thresholds"));
        }
        Ok(())
    }

    /// Parameters with the zone's overrides applied.
    pub fn for_zone(&self, zone: Zone) -> MpcParams {
        let mut p = self.clone();
        if let Some(z) = self.presets.get(&zone) {
            p.a_lat_max = z.a_lat_max;
            p.margin = z.margin;
        }
        p
    }
}

/// Speeds at each curvature sample: pointwise lateral-acceleration cap, a
/// forward acceleration pass from `v0`, the terminal corner-speed bound and
/// a backward braking pass.
pub fn speed_profile(kappa: &[(f64, f64)], params: &MpcParams, v0: f64) -> Result<Vec<f64>, AgentError> {
    if kappa.is_empty() {
        return Err(AgentError::EmptyProfile);
    }
    let mut v: Vec<f64> = kappa
        .iter()
        .map(|&(_, k)| (params.a_lat_max / k.abs().max(params.kappa_floor)).sqrt().min(params.v_max))
        .collect();
    let n = v.len();
    v[0] = v[0].min(v0.max(0.0));
    for i in 0..n - 1 {
        let dx = kappa[i + 1].0 - kappa[i].0;
        v[i + 1] = v[i + 1].min((v[i] * v[i] + 2.0 * params.a_accel_max * dx).sqrt());
    }
    v[n - 1] = v[n - 1].min(params.v_corner_min);
    for i in (0..n - 1).rev() {
        let dx = kappa[i + 1].0 - kappa[i].0;
        v[i] = v[i].min((v[i + 1] * v[i + 1] + 2.0 * params.a_brake_max * dx).sqrt());
    }
    Ok(v)
}

pub fn zone_from_curvature(kappa: &[(f64, f64)], params: &MpcParams) -> Zone {
    let kmax = kappa.iter().map(|&(_, k)| k.abs()).fold(0.0, f64::max);
    if kmax < params.straight_below {
        Zone::Straight
    } else if kmax > params.hairpin_above {
        Zone::Hairpin
    } else {
        Zone::Sweeper
    }
}

pub fn zone_classify(limits: &TrackLimits, params: &MpcParams) -> Result<Zone, AgentError> {
    let kappa = perception::centerline_curvature(limits)?;
    Ok(zone_from_curvature(&kappa, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedPoint {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlannedTrajectory {
    pub points: Vec<PlannedPoint>,
}

impl PlannedTrajectory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,y,v,delta")?;
        for p in &self.points {
            writeln!(w, "{},{},{},{}", p.x, p.y, p.v, p.delta)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcOutput {
    pub trajectory: PlannedTrajectory,
    pub action: Action,
    pub infeasible: bool,
    pub zone: Zone,
    /// Lateral bounds the path was held inside, one per station 1..=N.
    pub corridor: Vec<(f64, f64)>,
}

fn safe_stop(zone: Zone) -> MpcOutput {
    MpcOutput {
        trajectory: PlannedTrajectory::default(),
        action: Action::new(0.0, -1.0),
        infeasible: true,
        zone,
        corridor: Vec::new(),
    }
}

/// One receding-horizon plan in the vehicle frame.
///
/// The path is the lateral offset `y_i` at stations `x_i = i ds`, starting
/// at the vehicle and tangent to its heading. It minimizes squared second
/// differences (curvature) plus a small pull toward the midline, subject to
/// the corridor shrunk by the vehicle half-width and the margin on each
/// side. Speeds come from [`speed_profile`] over the path curvature.
pub fn mpc_plan(state: &VehicleState, limits: &TrackLimits, params: &MpcParams) -> MpcOutput {
    let zone = zone_classify(limits, params).unwrap_or(Zone::Sweeper);
    let p = params.for_zone(zone);
    let ds = p.ds;
    let n = p.horizon.min((limits.horizon() / ds + 1e-9).floor() as usize);
    if n < 4 {
        return safe_stop(zone);
    }
    let shrink = p.half_width + p.margin;
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    let mut mid = Vec::with_capacity(n);
    for i in 1..=n {
        let (l, r) = limits.interpolate(i as f64 * ds);
        let (a, b) = (r + shrink, l - shrink);
        if !(a < b) {
            return safe_stop(zone);
        }
        lo.push(a);
        hi.push(b);
        mid.push(0.5 * (l + r));
    }

    // Hessian of Σ_{i=0}^{n-1} (y_{i+1} - 2 y_i + y_{i-1})² / ds⁴ + w Σ (y_i - m_i)²
    // with y_0 = y_{-1} = 0 fixed.
    let inv = 1.0 / ds.powi(4);
    let mut h = vec![vec![0.0; n]; n];
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|k| {
            // row k of D: second difference centred on y_k (k = 0 is y_0)
            let mut row = Vec::with_capacity(3);
            for (off, c) in [(1isize, 1.0), (0, -2.0), (-1, 1.0)] {
                let j = k as isize + off;
                if j >= 1 {
                    row.push((j as usize - 1, c));
                }
            }
            row
        })
        .collect();
    for row in &rows {
        for &(a, ca) in row {
            for &(b, cb) in row {
                h[a][b] += ca * cb * inv;
            }
        }
    }
    let w = p.center_weight;
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        h[i][i] += w;
        rhs[i] = w * mid[i];
    }
    let y = solve_box_qp(&h, &rhs, &lo, &hi);

    // full path including the two fixed stations
    let mut ys = Vec::with_capacity(n + 2);
    ys.push(0.0);
    ys.push(0.0);
    ys.extend_from_slice(&y);
    // the last station reuses the curvature just before it
    let kappa: Vec<(f64, f64)> = (0..=n)
        .map(|i| {
            let c = i.min(n - 1);
            let (ym, y0, yp) = (ys[c], ys[c + 1], ys[c + 2]);
            let d1 = (yp - ym) / (2.0 * ds);
            let d2 = (yp - 2.0 * y0 + ym) / (ds * ds);
            (i as f64 * ds, d2 / (1.0 + d1 * d1).powf(1.5))
        })
        .collect();
    let v = speed_profile(&kappa, &p, state.speed).expect("non-empty profile");

    let points: Vec<PlannedPoint> = (0..=n)
        .map(|i| PlannedPoint {
            x: i as f64 * ds,
            y: ys[i + 1],
            v: v[i],
            delta: (p.wheelbase * kappa[i].1).atan(),
        })
        .collect();

    // steer for the curvature a short distance ahead
    let reach = ((state.speed * 0.25 / ds).round() as usize).clamp(1, n);
    let k_steer = kappa[1..=reach].iter().map(|&(_, k)| k).sum::<f64>() / reach as f64;
    let steer = (p.wheelbase * k_steer).atan();
    let v0 = state.speed.max(0.0);
    let accel = (v[1] * v[1] - v0 * v0) / (2.0 * ds);
    let accel = accel.clamp(-p.a_brake_max, p.a_accel_max);
    let vp = VehicleParams {
        wheelbase: p.wheelbase,
        max_steer: p.max_steer,
        max_accel: p.a_accel_max,
        max_brake: p.a_brake_max,
        ..VehicleParams::default()
    };
    MpcOutput {
        trajectory: PlannedTrajectory { points },
        action: action_for(steer, accel, &vp),
        infeasible: false,
        zone,
        corridor: lo.into_iter().zip(hi).collect(),
    }
}

/// Minimize `½ yᵀHy − bᵀy` subject to `lo ≤ y ≤ hi` by a primal active-set
/// method. `H` must be symmetric positive definite.
fn solve_box_qp(h: &[Vec<f64>], b: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let n = b.len();
    #[derive(Clone, Copy, PartialEq)]
    enum Bound {
        Free,
        Lower,
        Upper,
    }
    let mut y: Vec<f64> = (0..n).map(|i| (b[i] / h[i][i]).clamp(lo[i], hi[i])).collect();
    let mut state: Vec<Bound> = (0..n)
        .map(|i| {
            if y[i] == lo[i] {
                Bound::Lower
            } else if y[i] == hi[i] {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();
    for _ in 0..(20 * n + 20) {
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == Bound::Free).collect();
        // equality-constrained optimum over the free set
        let target = if free.is_empty() {
            Vec::new()
        } else {
            let m = free.len();
            let mut a = vec![vec![0.0; m]; m];
            let mut r = vec![0.0; m];
            for (ii, &i) in free.iter().enumerate() {
                r[ii] = b[i];
                for j in 0..n {
                    if state[j] != Bound::Free {
                        r[ii] -= h[i][j] * y[j];
                    }
                }
                for (jj, &j) in free.iter().enumerate() {
                    a[ii][jj] = h[i][j];
                }
            }
            cholesky_solve(a, r)
        };
        let mut alpha = 1.0;
        let mut blocking = None;
        for (ii, &i) in free.iter().enumerate() {
            let step = target[ii] - y[i];
            if step < 0.0 {
                let a = (lo[i] - y[i]) / step;
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, Bound::Lower));
                }
            } else if step > 0.0 {
                let a = (hi[i] - y[i]) / step;
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, Bound::Upper));
                }
            }
        }
        for (ii, &i) in free.iter().enumerate() {
            y[i] += alpha.max(0.0) * (target[ii] - y[i]);
        }
        if let Some((i, bound)) = blocking {
            y[i] = if bound == Bound::Lower { lo[i] } else { hi[i] };
            state[i] = bound;
            continue;
        }
        // optimal on the current face: release the worst multiplier
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..n {
            let g: f64 = (0..n).map(|j| h[i][j] * y[j]).sum::<f64>() - b[i];
            let viol = match state[i] {
                Bound::Lower if g < 0.0 => -g,
                Bound::Upper if g > 0.0 => g,
                _ => continue,
            };
            if worst.is_none_or(|(_, v)| viol > v) {
                worst = Some((i, viol));
            }
        }
        match worst {
            Some((i, v)) if v > 1e-12 => state[i] = Bound::Free,
            _ => break,
        }
    }
    y
}

fn cholesky_solve(mut a: Vec<Vec<f64>>, mut r: Vec<f64>) -> Vec<f64> {
    let m = r.len();
    for j in 0..m {
        let mut d = a[j][j];
        for k in 0..j {
            d -= a[j][k] * a[j][k];
        }
        let d = d.max(1e-300).sqrt();
        a[j][j] = d;
        for i in j + 1..m {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            a[i][j] = s / d;
        }
    }
    for i in 0..m {
        for k in 0..i {
            r[i] -= a[i][k] * r[k];
        }
        r[i] /= a[i][i];
    }
    for i in (0..m).rev() {
        for k in i + 1..m {
            r[i] -= a[k][i] * r[k];
        }
        r[i] /= a[i][i];
    }
    r
}

/// Steer angle toward `goal` (vehicle frame): `atan(2 L sin α / ld)`.
pub fn pursuit_steer(goal: Vec2, wheelbase: f64) -> f64 {
    let ld = goal.norm();
    if ld == 0.0 {
        return 0.0;
    }
    let alpha = goal.y.atan2(goal.x);
    (2.0 * wheelbase * alpha.sin() / ld).atan()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PursuitParams {
    pub lookahead: f64,
    pub target_speed: f64,
    /// Acceleration per m/s of speed error, m/s² / (m/s).
    pub speed_gain: f64,
}

impl Default for PursuitParams {
    fn default() -> Self {
        PursuitParams {
            lookahead: 10.0,
            target_speed: 8.0,
            speed_gain: 1.0,
        }
    }
}

/// Chase the limits' midline at the lookahead, shrunk to the horizon.
pub fn pure_pursuit(state: &VehicleState, limits: &TrackLimits, pp: &PursuitParams, p: &VehicleParams) -> Action {
    let x = pp.lookahead.min(limits.horizon());
    let steer = if x > 0.0 {
        pursuit_steer(Vec2::new(x, limits.midline_at(x)), p.wheelbase)
    } else {
        0.0
    };
    let accel = pp.speed_gain * (pp.target_speed - state.speed);
    action_for(steer, accel, p)
}

fn front_limits(obs: &Observation, view: CameraView, step: f64, horizon: f64) -> Result<TrackLimits, AgentError> {
    let raster = obs
        .cameras
        .get(&view)
        .ok_or(AgentError::Perception(PerceptionError::EmptyScene))?;
    Ok(perception::perceive(raster, &CameraCalibration::default_for(view), step, horizon)?)
}

/// Uniform random actions.
pub struct RandomAgent {
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(seed: u64) -> Self {
        RandomAgent {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Agent for RandomAgent {
    fn name(&self) -> &str {
        "random"
    }
    fn act(&mut self, _obs: &Observation) -> Action {
        Action::new(self.rng.gen_range(-1.0..=1.0), self.rng.gen_range(-1.0..=1.0))
    }
}

/// Straight ahead, full throttle.
pub struct FullThrottleAgent;

impl Agent for FullThrottleAgent {
    fn name(&self) -> &str {
        "full_throttle"
    }
    fn act(&mut self, _obs: &Observation) -> Action {
        Action::new(0.0, 1.0)
    }
}

/// Never moves.
pub struct IdleAgent;

impl Agent for IdleAgent {
    fn name(&self) -> &str {
        "idle"
    }
    fn act(&mut self, _obs: &Observation) -> Action {
        Action::ZERO
    }
}

/// Steer state the camera agents carry between steps (the angle itself is
/// not observed).
#[derive(Debug, Clone, Copy, Default)]
struct Memory {
    steer: f64,
    last: Action,
}

pub struct PurePursuitAgent {
    pub params: PursuitParams,
    pub vehicle: VehicleParams,
    memory: Memory,
}

impl PurePursuitAgent {
    pub fn new(params: PursuitParams, vehicle: VehicleParams) -> Self {
        PurePursuitAgent {
            params,
            vehicle,
            memory: Memory::default(),
        }
    }
}

impl Default for PurePursuitAgent {
    fn default() -> Self {
        PurePursuitAgent::new(PursuitParams::default(), VehicleParams::default())
    }
}

impl Agent for PurePursuitAgent {
    fn name(&self) -> &str {
        "pure_pursuit"
    }
    fn reset(&mut self) {
        self.memory = Memory::default();
    }
    fn act(&mut self, obs: &Observation) -> Action {
        let state = VehicleState {
            speed: obs.speed,
            steer: self.memory.steer,
            ..VehicleState::default()
        };
        let a = match front_limits(obs, CameraView::Front, 1.0, 30.0) {
            Ok(limits) => pure_pursuit(&state, &limits, &self.params, &self.vehicle),
            Err(_) => Action::new(self.memory.last.steering, -0.25),
        };
        self.memory.last = a;
        self.memory.steer = a.steering * self.vehicle.max_steer;
        a
    }
}

pub struct MpcAgent {
    pub params: MpcParams,
    pub vehicle: VehicleParams,
    memory: Memory,
    dump: Option<Vec<PlannedTrajectory>>,
}

impl MpcAgent {
    pub fn new(params: MpcParams, vehicle: VehicleParams) -> Self {
        MpcAgent {
            params,
            vehicle,
            memory: Memory::default(),
            dump: None,
        }
    }

    /// Keep every plan for later inspection.
    pub fn record_plans(&mut self) {
        self.dump = Some(Vec::new());
    }

    pub fn plans(&self) -> &[PlannedTrajectory] {
        self.dump.as_deref().unwrap_or(&[])
    }

    pub fn plan(&self, obs: &Observation) -> Result<MpcOutput, AgentError> {
        let limits = front_limits(obs, CameraView::Front, self.params.ds, self.params.ds * self.params.horizon as f64)?;
        let state = VehicleState {
            speed: obs.speed,
            steer: self.memory.steer,
            ..VehicleState::default()
        };
        Ok(mpc_plan(&state, &limits, &self.params))
    }
}

impl Default for MpcAgent {
    fn default() -> Self {
        let v = VehicleParams::default();
        MpcAgent::new(MpcParams::from_vehicle(&v), v)
    }
}

impl Agent for MpcAgent {
    fn name(&self) -> &str {
        "mpc"
    }
    fn reset(&mut self) {
        self.memory = Memory::default();
    }
    fn act(&mut self, obs: &Observation) -> Action {
        let a = match self.plan(obs) {
            Ok(out) => {
                if let Some(d) = self.dump.as_mut() {
                    d.push(out.trajectory.clone());
                }
                out.action
            }
            Err(_) => Action::new(self.memory.last.steering, -0.25),
        };
        self.memory.last = a;
        self.memory.steer = a.steering * self.vehicle.max_steer;
        a
    }
}
