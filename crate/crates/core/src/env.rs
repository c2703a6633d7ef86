//! The racing MDP: make / reset / step with segment accounting, respawn,
//! infraction detection and camera-surrogate rasters.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;
use crate::metrics::{EpisodeResult, Infraction, InfractionKind, MetricsError, StepEvent, Tracker};
use crate::track::{Track, TrackError, TrackFrame};
use crate::vehicle::{step_with_distance, wheel_positions, Action, DynamicsError, VehicleParams, VehicleState};

pub const INFRACTION_REWARD: f64 = -10.0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid config field {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("step called before reset")]
    NotReset,
    #[error("step called after the episode finished")]
    EpisodeDone,
    #[error("action has a non-finite channel")]
    InvalidAction,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraView {
    Front,
    Left,
    Right,
}

impl CameraView {
    pub const ALL: [CameraView; 3] = [CameraView::Front, CameraView::Left, CameraView::Right];

    pub fn name(self) -> &'static str {
        match self {
            CameraView::Front => "front",
            CameraView::Left => "left",
            CameraView::Right => "right",
        }
    }
}

impl fmt::Display for CameraView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CameraView {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CameraView::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown camera view {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    Privileged,
    CameraOnly,
}

/// Top-down drivability raster geometry for one view.
///
/// Row `r` sits `(r + 0.5) * resolution` ahead of the mount along the view
/// axis; column 0 is the leftmost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraCalibration {
    pub view: CameraView,
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    /// Vehicle frame, x forward, y left.
    pub mount: Vec2,
    pub yaw: f64,
}

impl CameraCalibration {
    pub fn default_for(view: CameraView) -> Self {
        let (mount, yaw) = match view {
            CameraView::Front => (Vec2::ZERO, 0.0),
            CameraView::Left => (Vec2::new(0.0, 1.0), 0.9),
            CameraView::Right => (Vec2::new(0.0, -1.0), -0.9),
        };
        CameraCalibration {
            view,
            width: 64,
            height: 64,
            resolution: 0.5,
            mount,
            yaw,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(EnvError::InvalidConfig {
                field: "resolution",
                reason: format!("{} is not positive", self.resolution),
            });
        }
        if self.width < 16 || self.height < 16 {
            return Err(EnvError::InvalidConfig {
                field: "grid",
                reason: format!("{}x{} below 16x16", self.width, self.height),
            });
        }
        Ok(())
    }

    /// Cell center in the view frame (x along the view axis, y left).
    pub fn cell_in_view(&self, row: usize, col: usize) -> Vec2 {
        Vec2::new(
            (row as f64 + 0.5) * self.resolution,
            ((self.width as f64 - 1.0) * 0.5 - col as f64) * self.resolution,
        )
    }

    /// Cell center in the vehicle frame.
    pub fn cell_in_vehicle(&self, row: usize, col: usize) -> Vec2 {
        self.mount + self.cell_in_view(row, col).rotate(self.yaw)
    }

    /// View-frame point to vehicle frame.
    pub fn view_to_vehicle(&self, p: Vec2) -> Vec2 {
        self.mount + p.rotate(self.yaw)
    }
}

/// Row-major binary raster, 1 = drivable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Raster {
            width,
            height,
            cells: vec![0; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.cells[row * self.width + col] = v;
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.cells[row * self.width..(row + 1) * self.width]
    }

    pub fn mirrored(&self) -> Raster {
        let mut out = Raster::new(self.width, self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, self.width - 1 - c, self.get(r, c));
            }
        }
        out
    }

    pub fn count_drivable(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }
}

/// Render the drivability raster seen from `state`.
pub fn render_raster(track: &Track, state: &VehicleState, calib: &CameraCalibration) -> Raster {
    let mut out = Raster::new(calib.width, calib.height);
    for r in 0..calib.height {
        for c in 0..calib.width {
            let world = state.position + calib.cell_in_vehicle(r, c).rotate(state.heading);
            if track.is_drivable(world) {
                out.set(r, c, 1);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Privileged {
    pub position: Vec2,
    pub heading: f64,
    /// None when the vehicle is off the track.
    pub frame: Option<TrackFrame>,
    /// Ground-truth front-view drivability.
    pub mask: Option<Raster>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub speed: f64,
    pub cameras: BTreeMap<CameraView, Raster>,
    pub privileged: Option<Privileged>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Watchdog {
    /// m
    pub min_progress: f64,
    /// s
    pub window: f64,
}

impl Default for Watchdog {
    fn default() -> Self {
        Watchdog {
            min_progress: 1.0,
            window: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub track: Arc<Track>,
    pub dt: f64,
    pub n_segments: Option<usize>,
    pub mode: ObservationMode,
    pub cameras: Vec<CameraView>,
    pub watchdog: Watchdog,
    pub max_episode_time: f64,
    pub vehicle: VehicleParams,
    /// Include the ground-truth mask in privileged observations.
    pub privileged_mask: bool,
    pub log_trajectory: bool,
}

impl EnvConfig {
    pub fn new(track: Arc<Track>) -> Self {
        EnvConfig {
            track,
            dt: 0.05,
            n_segments: None,
            mode: ObservationMode::CameraOnly,
            cameras: vec![CameraView::Front],
            watchdog: Watchdog::default(),
            max_episode_time: 900.0,
            vehicle: VehicleParams::default(),
            privileged_mask: true,
            log_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub segment: usize,
    pub segment_completed: bool,
    pub infraction: Option<Infraction>,
    pub s: f64,
    pub lap_completed: bool,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub steer: f64,
    pub action: Action,
    pub segment: usize,
    pub infraction: Option<InfractionKind>,
}

pub const TRAJECTORY_HEADER: &str = "t,x,y,psi,v,delta,steering,acceleration,segment,infraction";

pub fn write_trajectory_csv<W: Write>(mut w: W, records: &[TrajectoryRecord]) -> io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.x,
            r.y,
            r.heading,
            r.speed,
            r.steer,
            r.action.steering,
            r.action.acceleration,
            r.segment,
            r.infraction.map_or("", |k| k.name())
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Fresh,
    Running,
    Done,
}

pub struct Env {
    config: EnvConfig,
    track: Arc<Track>,
    calibs: Vec<CameraCalibration>,
    state: VehicleState,
    phase: Phase,
    segment: usize,
    /// Unwrapped arc length of the vehicle since the last spawn.
    s_unwrapped: f64,
    s_wrapped: f64,
    spawn_t: f64,
    history: VecDeque<(f64, f64)>,
    tracker: Tracker,
    result: Option<EpisodeResult>,
    trajectory: Vec<TrajectoryRecord>,
}

impl Env {
    pub fn make(config: EnvConfig) -> Result<Env, EnvError> {
        if !(config.dt > 0.0 && config.dt <= 0.1) {
            return Err(EnvError::InvalidConfig {
                field: "dt",
                reason: format!("{} outside (0, 0.1]", config.dt),
            });
        }
        if config.mode == ObservationMode::CameraOnly && config.cameras.is_empty() {
            return Err(EnvError::InvalidConfig {
                field: "cameras",
                reason: "camera_only mode needs at least one camera".into(),
            });
        }
        let mut seen = Vec::new();
        for v in &config.cameras {
            if seen.contains(v) {
                return Err(EnvError::InvalidConfig {
                    field: "cameras",
                    reason: format!("duplicate view {v}"),
                });
            }
            seen.push(*v);
        }
        if !(config.watchdog.window > 0.0 && config.watchdog.min_progress >= 0.0) {
            return Err(EnvError::InvalidConfig {
                field: "watchdog",
                reason: "window must be positive and min_progress non-negative".into(),
            });
        }
        if !(config.max_episode_time > 0.0) {
            return Err(EnvError::InvalidConfig {
                field: "max_episode_time",
                reason: format!("{} is not positive", config.max_episode_time),
            });
        }
        config.vehicle.validate()?;
        let track = match config.n_segments {
            Some(n) if n != config.track.n_segments() => Arc::new(config.track.with_segments(n)?),
            _ => config.track.clone(),
        };
        let calibs = config.cameras.iter().map(|&v| CameraCalibration::default_for(v)).collect();
        let state = VehicleState::default();
        let tracker = Tracker::new(track.n_segments(), &state);
        Ok(Env {
            config,
            track,
            calibs,
            state,
            phase: Phase::Fresh,
            segment: 0,
            s_unwrapped: 0.0,
            s_wrapped: 0.0,
            spawn_t: 0.0,
            history: VecDeque::new(),
            tracker,
            result: None,
            trajectory: Vec::new(),
        })
    }

    pub fn track(&self) -> &Arc<Track> {
        &self.track
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn segment(&self) -> usize {
        self.segment
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn calibrations(&self) -> &[CameraCalibration] {
        &self.calibs
    }

    /// Result of the last finished episode.
    pub fn result(&self) -> Option<&EpisodeResult> {
        self.result.as_ref()
    }

    /// Result so far of the running episode.
    pub fn partial_result(&self) -> &EpisodeResult {
        self.tracker.current()
    }

    pub fn trajectory(&self) -> &[TrajectoryRecord] {
        &self.trajectory
    }

    pub fn reset(&mut self) -> Observation {
        self.state = VehicleState::default();
        self.spawn_at(0);
        self.tracker = Tracker::new(self.track.n_segments(), &self.state);
        self.result = None;
        self.trajectory.clear();
        self.phase = Phase::Running;
        self.observe()
    }

    /// Overwrite the vehicle state (tests and scripted scenarios).
    pub fn set_state(&mut self, state: VehicleState) {
        self.state = state;
    }

    fn spawn_at(&mut self, segment: usize) {
        let s = self.track.segment_starts()[segment];
        let sample = self.track.sample(s).expect("segment start lies on the track");
        self.state = VehicleState::at_rest(sample.point, sample.heading, self.state.t);
        self.segment = segment;
        self.s_unwrapped = s;
        self.s_wrapped = s;
        self.spawn_t = self.state.t;
        self.history.clear();
        self.history.push_back((self.state.t, s));
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        match self.phase {
            Phase::Fresh => return Err(EnvError::NotReset),
            Phase::Done => return Err(EnvError::EpisodeDone),
            Phase::Running => {}
        }
        if !(action.steering.is_finite() && action.acceleration.is_finite()) {
            return Err(EnvError::InvalidAction);
        }
        let action = Action::clamped(action.steering, action.acceleration);
        let dt = self.config.dt;
        let (next, dist) = step_with_distance(&self.state, action, dt, &self.config.vehicle)?;
        self.state = next;

        let ds = match self.track.project(self.state.position) {
            Ok(f) => {
                let mut ds = f.s - self.s_wrapped;
                if self.track.is_closed() {
                    let l = self.track.total_length();
                    ds -= l * (ds / l).round();
                }
                self.s_wrapped = f.s;
                ds
            }
            Err(_) => 0.0,
        };
        self.s_unwrapped += ds;
        let t = self.state.t;
        self.history.push_back((t, self.s_unwrapped));
        let window = self.config.watchdog.window;
        while self.history.len() > 1 && self.history[1].0 <= t - window + 1e-9 {
            self.history.pop_front();
        }

        let mut info = StepInfo {
            segment: self.segment,
            segment_completed: false,
            infraction: None,
            s: self.s_wrapped,
            lap_completed: false,
            timed_out: false,
        };
        let mut reward = ds;
        let n = self.track.n_segments();
        let mut events = Vec::new();
        if let Some(kind) = self.detect_infraction() {
            let inf = Infraction {
                kind,
                s: self.s_wrapped,
                t,
                segment: self.segment,
            };
            info.infraction = Some(inf);
            events.push(StepEvent::Infraction(inf));
            reward = INFRACTION_REWARD;
        } else if self.s_unwrapped >= self.track.segment_end(self.segment) {
            info.segment_completed = true;
            events.push(StepEvent::SegmentCompleted(self.segment));
        }
        self.tracker.record_step(&self.state, dist, dt, &events)?;
        self.log(action, info.infraction.map(|i| i.kind));

        let mut done = false;
        if info.infraction.is_some() {
            if self.segment + 1 == n {
                done = true;
            } else {
                self.spawn_at(self.segment + 1);
                self.tracker.record_respawn()?;
            }
        } else if info.segment_completed {
            if self.segment + 1 == n {
                done = true;
                info.lap_completed = true;
            } else {
                self.segment += 1;
            }
        }
        if !done && self.tracker.elapsed() >= self.config.max_episode_time - 1e-9 {
            let charged: Vec<Infraction> = (self.segment..n)
                .map(|segment| Infraction {
                    kind: InfractionKind::NoProgress,
                    s: self.s_wrapped,
                    t,
                    segment,
                })
                .collect();
            self.tracker.record_infractions(&charged)?;
            info.timed_out = true;
            done = true;
        }
        info.segment = self.segment;
        if done {
            self.phase = Phase::Done;
            self.result = Some(self.tracker.close()?);
        }
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            done,
            info,
        })
    }

    fn log(&mut self, action: Action, infraction: Option<InfractionKind>) {
        if !self.config.log_trajectory {
            return;
        }
        self.trajectory.push(TrajectoryRecord {
            t: self.state.t,
            x: self.state.position.x,
            y: self.state.position.y,
            heading: self.state.heading,
            speed: self.state.speed,
            steer: self.state.steer,
            action,
            segment: self.segment,
            infraction,
        });
    }

    /// Infraction for the current state, in priority order off_track,
    /// collision, no_progress.
    pub fn detect_infraction(&self) -> Option<InfractionKind> {
        let p = &self.config.vehicle;
        let off = wheel_positions(&self.state, p)
            .iter()
            .filter(|&&w| !self.track.is_drivable(w))
            .count();
        if off >= 2 {
            return Some(InfractionKind::OffTrack);
        }
        if self
            .track
            .obstacles()
            .iter()
            .any(|o| footprint_hits_disc(&self.state, p, o.center, o.radius))
        {
            return Some(InfractionKind::Collision);
        }
        let wd = self.config.watchdog;
        let (t, s) = *self.history.back()?;
        let (t0, s0) = *self.history.front()?;
        if t - self.spawn_t >= wd.window - 1e-9 && t - t0 >= wd.window - 1e-9 && s - s0 < wd.min_progress {
            return Some(InfractionKind::NoProgress);
        }
        None
    }

    pub fn render_camera(&self, calib: &CameraCalibration) -> Raster {
        render_raster(&self.track, &self.state, calib)
    }

    fn observe(&self) -> Observation {
        let cameras: BTreeMap<CameraView, Raster> =
            self.calibs.iter().map(|c| (c.view, self.render_camera(c))).collect();
        let privileged = match self.config.mode {
            ObservationMode::CameraOnly => None,
            ObservationMode::Privileged => {
                let frame = self.track.project(self.state.position).ok();
                let mask = self.config.privileged_mask.then(|| {
                    cameras
                        .get(&CameraView::Front)
                        .cloned()
                        .unwrap_or_else(|| self.render_camera(&CameraCalibration::default_for(CameraView::Front)))
                });
                Some(Privileged {
                    position: self.state.position,
                    heading: self.state.heading,
                    frame,
                    mask,
                })
            }
        };
        Observation {
            speed: self.state.speed,
            cameras,
            privileged,
        }
    }
}

/// Oriented footprint rectangle against a disc: clamp the disc center into
/// the rectangle in the vehicle frame.
pub fn footprint_hits_disc(state: &VehicleState, p: &VehicleParams, center: Vec2, radius: f64) -> bool {
    let local = (center - state.position).rotate(-state.heading);
    let hl = p.footprint_length * 0.5;
    let hw = p.footprint_width * 0.5;
    let nearest = Vec2::new(local.x.clamp(-hl, hl), local.y.clamp(-hw, hw));
    nearest.distance(local) <= radius
}
