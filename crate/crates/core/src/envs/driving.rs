//! Continuous racing toy: acceleration and steering in `[-1, 1]²`.

use serde::{Deserialize, Serialize};

use super::{finish_step, goal_distance, sticky_done, EnvConfig, EnvState, Transition};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrivingPhysics {
    pub dt: f64,
    pub max_accel: f64,
    /// rad/s at full steer
    pub max_steer_rate: f64,
    pub drag: f64,
    pub max_speed: f64,
    pub goal_radius: f64,
}

impl Default for DrivingPhysics {
    fn default() -> Self {
        Self {
            dt: 0.1,
            max_accel: 2.0,
            max_steer_rate: 1.5,
            drag: 0.2,
            max_speed: 3.0,
            goal_radius: 1.0,
        }
    }
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-1.0, 1.0)
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// One kinematic step. `action = [accel, steer]`, clamped to `[-1, 1]`.
pub fn step_driving(config: &EnvConfig, state: &EnvState, action: [f64; 2]) -> Transition {
    if state.done {
        return sticky_done(config, state);
    }
    let p = &config.driving;
    let layout = &config.layout;
    let accel = clamp_unit(action[0]);
    let steer = clamp_unit(action[1]);

    let mut next = state.clone();
    next.heading = wrap_angle(state.heading + steer * p.max_steer_rate * p.dt);
    next.angular_velocity = steer * p.max_steer_rate;
    next.speed =
        (state.speed + accel * p.max_accel * p.dt - p.drag * state.speed * p.dt).clamp(-p.max_speed, p.max_speed);
    let (s, c) = next.heading.sin_cos();
    let x = state.position[0] + c * next.speed * p.dt;
    let z = state.position[2] + s * next.speed * p.dt;
    let (cx, cz) = layout.cell_of(x, z);
    if layout.cell(cx, cz).walkable() {
        next.position = [x, state.position[1], z];
    } else {
        next.speed = 0.0;
    }
    for i in 0..3 {
        next.velocity[i] = (next.position[i] - state.position[i]) / p.dt;
    }
    let at_goal = goal_distance(&next, layout) <= p.goal_radius;
    finish_step(config, state, next, at_goal)
}
