//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use race_core::env::render_raster;
use race_core::perception::{perceive, TrackLimits};
use race_core::{generate_track, CameraCalibration, CameraView, Track, TrackKind, TrackSpec, VehicleState};

pub fn track(kind: TrackKind) -> Arc<Track> {
    Arc::new(generate_track(&TrackSpec::new(kind), 0).expect("stand-in generates"))
}

/// Vehicle on the centerline at `s`, facing along it, at `speed`.
pub fn on_track(track: &Track, s: f64, speed: f64) -> VehicleState {
    let smp = track.sample(s).expect("s on track");
    VehicleState {
        position: smp.point,
        heading: smp.heading,
        speed,
        ..VehicleState::default()
    }
}

pub fn limits_at(track: &Track, s: f64) -> TrackLimits {
    let calib = CameraCalibration::default_for(CameraView::Front);
    let raster = render_raster(track, &on_track(track, s, 0.0), &calib);
    perceive(&raster, &calib, 1.0, 32.0).expect("centerline view perceives")
}
