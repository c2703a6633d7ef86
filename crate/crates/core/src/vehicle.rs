//! Kinematic bicycle plant driven by the normalized two-channel action.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("time step {0} s outside (0, 0.1]")]
    InvalidTimestep(f64),
    #[error("non-finite vehicle state after integration")]
    NonFinite,
    #[error("invalid vehicle parameter {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub footprint_length: f64,
    pub footprint_width: f64,
    pub max_steer: f64,
    pub max_accel: f64,
    pub max_brake: f64,
    pub max_speed: f64,
    /// rad/s
    pub steer_rate_limit: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            wheelbase: 3.0,
            footprint_length: 4.8,
            footprint_width: 2.0,
            max_steer: 0.35,
            max_accel: 4.0,
            max_brake: 8.0,
            max_speed: 75.0,
            steer_rate_limit: 1.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let checks = [
            (self.wheelbase, "wheelbase"),
            (self.footprint_length, "footprint_length"),
            (self.footprint_width, "footprint_width"),
            (self.max_steer, "max_steer"),
            (self.max_accel, "max_accel"),
            (self.max_brake, "max_brake"),
            (self.max_speed, "max_speed"),
            (self.steer_rate_limit, "steer_rate_limit"),
        ];
        for (v, name) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DynamicsError::InvalidParams(name));
            }
        }
        if self.max_steer >= std::f64::consts::FRAC_PI_2 {
            return Err(DynamicsError::InvalidParams("max_steer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub steer: f64,
    pub t: f64,
}

impl VehicleState {
    pub fn at_rest(position: Vec2, heading: f64, t: f64) -> Self {
        VehicleState {
            position,
            heading,
            speed: 0.0,
            steer: 0.0,
            t,
        }
    }
}

/// Normalized controls, both channels in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub steering: f64,
    pub acceleration: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        steering: 0.0,
        acceleration: 0.0,
    };

    pub fn new(steering: f64, acceleration: f64) -> Self {
        Action {
            steering,
            acceleration,
        }
    }

    pub fn clamped(steering: f64, acceleration: f64) -> Self {
        Action {
            steering: steering.clamp(-1.0, 1.0),
            acceleration: acceleration.clamp(-1.0, 1.0),
        }
    }

    pub fn is_valid(&self) -> bool {
        (-1.0..=1.0).contains(&self.steering) && (-1.0..=1.0).contains(&self.acceleration)
    }
}

/// Linear scaling to (target steer angle, longitudinal acceleration).
pub fn map_action(a: Action, p: &VehicleParams) -> (f64, f64) {
    let steer = a.steering * p.max_steer;
    let accel = if a.acceleration >= 0.0 {
        a.acceleration * p.max_accel
    } else {
        a.acceleration * p.max_brake
    };
    (steer, accel)
}

/// Normalized action that requests `steer` (rad) and `accel` (m/s²), saturated.
pub fn action_for(steer: f64, accel: f64, p: &VehicleParams) -> Action {
    let acc = if accel >= 0.0 {
        accel / p.max_accel
    } else {
        accel / p.max_brake
    };
    Action::clamped(steer / p.max_steer, acc)
}

/// Advance one step. See [`step_with_distance`].
pub fn step_dynamics(
    x: &VehicleState,
    a: Action,
    dt: f64,
    p: &VehicleParams,
) -> Result<VehicleState, DynamicsError> {
    step_with_distance(x, a, dt, p).map(|(s, _)| s)
}

/// Advance one step, also returning the path length driven.
///
/// Speed and steer angle have closed forms over the step (constant
/// acceleration clipped to `[0, max_speed]`, rate-limited slew toward the
/// target angle); position, heading and odometer are integrated with
/// classical RK4, split at the instants where either closed form has a kink.
pub fn step_with_distance(
    x: &VehicleState,
    a: Action,
    dt: f64,
    p: &VehicleParams,
) -> Result<(VehicleState, f64), DynamicsError> {
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(DynamicsError::InvalidTimestep(dt));
    }
    let (steer_target, accel) = map_action(a, p);
    let steer_target = steer_target.clamp(-p.max_steer, p.max_steer);
    let v0 = x.speed.clamp(0.0, p.max_speed);
    let d0 = x.steer.clamp(-p.max_steer, p.max_steer);

    let speed_at = |tau: f64| (v0 + accel * tau).clamp(0.0, p.max_speed);
    let slew = steer_target - d0;
    let slew_time = slew.abs() / p.steer_rate_limit;
    let steer_at = |tau: f64| {
        if tau >= slew_time {
            steer_target
        } else {
            d0 + slew.signum() * p.steer_rate_limit * tau
        }
    };

    let mut breaks = vec![0.0, dt];
    if slew_time > 0.0 && slew_time < dt {
        breaks.push(slew_time);
    }
    if accel != 0.0 {
        let bound = if accel > 0.0 { p.max_speed } else { 0.0 };
        let hit = (bound - v0) / accel;
        if hit > 0.0 && hit < dt {
            breaks.push(hit);
        }
    }
    breaks.sort_by(f64::total_cmp);

    // (x, y, heading, odometer)
    let deriv = |tau: f64, s: [f64; 4]| -> [f64; 4] {
        let v = speed_at(tau);
        let (sin, cos) = s[2].sin_cos();
        [v * cos, v * sin, v * steer_at(tau).tan() / p.wheelbase, v]
    };
    let mut s = [x.position.x, x.position.y, x.heading, 0.0];
    for w in breaks.windows(2) {
        let (t0, h) = (w[0], w[1] - w[0]);
        if h <= 0.0 {
            continue;
        }
        let k1 = deriv(t0, s);
        let k2 = deriv(t0 + h / 2.0, add(s, k1, h / 2.0));
        let k3 = deriv(t0 + h / 2.0, add(s, k2, h / 2.0));
        let k4 = deriv(t0 + h, add(s, k3, h));
        for i in 0..4 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }

    let next = VehicleState {
        position: Vec2::new(s[0], s[1]),
        heading: s[2],
        speed: speed_at(dt),
        steer: steer_at(dt),
        t: x.t + dt,
    };
    if !(next.position.is_finite() && next.heading.is_finite() && next.speed.is_finite() && s[3].is_finite()) {
        return Err(DynamicsError::NonFinite);
    }
    Ok((next, s[3]))
}

fn add(s: [f64; 4], k: [f64; 4], h: f64) -> [f64; 4] {
    [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2], s[3] + h * k[3]]
}

/// Footprint corners: front-left, front-right, rear-right, rear-left.
pub fn wheel_positions(x: &VehicleState, p: &VehicleParams) -> [Vec2; 4] {
    let hl = p.footprint_length * 0.5;
    let hw = p.footprint_width * 0.5;
    [
        Vec2::new(hl, hw),
        Vec2::new(hl, -hw),
        Vec2::new(-hl, -hw),
        Vec2::new(-hl, hw),
    ]
    .map(|c| x.position + c.rotate(x.heading))
}

/// Steady-state lateral acceleration `v² tan δ / L`.
pub fn lateral_acceleration(x: &VehicleState, p: &VehicleParams) -> f64 {
    x.speed * x.speed * x.steer.tan() / p.wheelbase
}
