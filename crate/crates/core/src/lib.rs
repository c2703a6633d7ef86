//! Desk-scale autonomous racing benchmark.
//!
//! The crate is organised bottom-up:
//!
//! - [`track`]: arc-length parameterized circuits, projection, drivability.
//! - [`vehicle`]: kinematic bicycle plant and the normalized action.
//! - [`env`]: the make/step/reset environment with segment accounting.
//! - [`metrics`]: per-episode tracker and SR / AATS / NSI / ED reports.
//! - [`perception`]: raster boundary extraction and cubic track limits.
//! - [`agents`]: speed profiling, the corridor MPC, pure pursuit, baselines.
//! - [`protocol`]: line-delimited agent wire protocol and session server.
//! - [`harness`]: stage protocols, leaderboard ranking, results store.

// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agents;
pub mod env;
pub mod geom;
pub mod harness;
pub mod metrics;
pub mod perception;
pub mod protocol;
pub mod track;
pub mod vehicle;

pub use env::{CameraCalibration, CameraView, Env, EnvConfig, Observation, ObservationMode, Raster, StepOutcome};
pub use geom::Vec2;
pub use harness::{CameraConfig, LeaderboardEntry, ResultStore, SubmissionResult};
pub use protocol::{AgentLink, InProcessLink, Message, RemoteLink};
pub use metrics::{aggregate, EpisodeResult, Infraction, InfractionKind, MetricsReport};
pub use track::{generate_track, Track, TrackFrame, TrackKind, TrackSpec};
pub use vehicle::{Action, VehicleParams, VehicleState};
