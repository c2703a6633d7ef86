use criterion::{black_box, criterion_group, criterion_main, Criterion};

use race_bench::{limits_at, on_track, track};
use race_core::agents::{mpc_plan, MpcParams};
use race_core::env::render_raster;
use race_core::perception::perceive;
use race_core::{Action, CameraCalibration, CameraView, Env, EnvConfig, ObservationMode, TrackKind, Vec2};

fn geometry(c: &mut Criterion) {
    let t = track(TrackKind::ThruxtonStandin);
    let probe = on_track(&t, 1234.5, 0.0).position + Vec2::new(1.5, -2.0);
    c.bench_function("project", |b| b.iter(|| t.project(black_box(probe))));
    c.bench_function("is_drivable", |b| b.iter(|| t.is_drivable(black_box(probe))));
}

fn sensing(c: &mut Criterion) {
    let t = track(TrackKind::VegasStandin);
    let st = on_track(&t, 800.0, 20.0);
    let calib = CameraCalibration::default_for(CameraView::Front);
    c.bench_function("render_raster", |b| b.iter(|| render_raster(&t, black_box(&st), &calib)));
    let raster = render_raster(&t, &st, &calib);
    c.bench_function("perceive", |b| b.iter(|| perceive(black_box(&raster), &calib, 1.0, 32.0)));
}

fn planning(c: &mut Criterion) {
    let t = track(TrackKind::VegasStandin);
    let limits = limits_at(&t, 800.0);
    let st = race_core::VehicleState {
        speed: 15.0,
        ..Default::default()
    };
    let p = MpcParams::default();
    c.bench_function("mpc_plan", |b| b.iter(|| mpc_plan(black_box(&st), &limits, &p)));
}

fn stepping(c: &mut Criterion) {
    let t = track(TrackKind::AngleseyStandin);
    for (name, cameras) in [("step_blind", vec![]), ("step_front", vec![CameraView::Front])] {
        let mut cfg = EnvConfig::new(t.clone());
        cfg.cameras = cameras;
        cfg.mode = ObservationMode::Privileged;
        cfg.privileged_mask = false;
        let mut env = Env::make(cfg).unwrap();
        env.reset();
        c.bench_function(name, |b| {
            b.iter(|| {
                if env.step(Action::new(0.0, 0.2)).unwrap().done {
                    env.reset();
                }
            })
        });
    }
}

criterion_group!(benches, geometry, sensing, planning, stepping);
criterion_main!(benches);
