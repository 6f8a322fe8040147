//! Toy driving (continuous) and navigation (discrete) environments.

pub mod driving;
pub mod layout;
pub mod navigation;
pub mod types;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use driving::{step_driving, DrivingPhysics};
pub use layout::{Cell, EnvId, Layout};
pub use navigation::{step_navigation, NavAction, NavigationRules};
pub use types::*;

use crate::error::{Error, Result};

/// Everything that defines an environment instance apart from its state.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub layout: Layout,
    pub driving: DrivingPhysics,
    pub navigation: NavigationRules,
    pub horizon: usize,
}

impl EnvConfig {
    pub fn new(layout: Layout) -> Self {
        let horizon = layout.horizon;
        Self {
            layout,
            driving: DrivingPhysics::default(),
            navigation: NavigationRules::default(),
            horizon,
        }
    }

    pub fn reference(id: EnvId) -> Self {
        Self::new(Layout::reference(id))
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn id(&self) -> EnvId {
        self.layout.kind
    }

    pub fn action_spec(&self) -> ActionSpec {
        match self.id() {
            EnvId::Driving => ActionSpec::Continuous { dims: 2 },
            EnvId::Navigation => ActionSpec::Discrete {
                count: navigation::NUM_ACTIONS,
            },
        }
    }

    /// Goal marker plus any static entities from the layout.
    pub fn n_entities(&self) -> usize {
        1 + self.layout.entities.len()
    }
}

/// Dynamic state of one environment instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 3],
    /// Radians in the XZ plane; forward is `(cos, sin)` in `(x, z)`.
    pub heading: f64,
    pub velocity: [f64; 3],
    pub speed: f64,
    pub angular_velocity: f64,
    pub step: usize,
    pub jump_cooldown: u32,
    pub magazine: u32,
    pub airborne: bool,
    pub done: bool,
    pub reached_goal: bool,
    pub seed: u64,
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub observation: Observation,
    pub task_reward: f64,
    pub done: bool,
}

/// Spawn state for a layout. The dynamics are deterministic, so the seed is
/// only recorded.
pub fn reset(config: &EnvConfig, seed: u64) -> (EnvState, Observation) {
    let layout = &config.layout;
    let heading = match config.id() {
        EnvId::Driving => layout.spawn_heading,
        EnvId::Navigation => navigation::snap_heading(layout.spawn_heading),
    };
    let state = EnvState {
        position: layout.spawn_position(),
        heading,
        velocity: [0.0; 3],
        speed: 0.0,
        angular_velocity: 0.0,
        step: 0,
        jump_cooldown: 0,
        magazine: config.navigation.magazine_size,
        airborne: false,
        done: false,
        reached_goal: false,
        seed,
    };
    let obs = encode(&state, config);
    (state, obs)
}

/// Horizontal distance from the agent to the goal center.
pub fn goal_distance(state: &EnvState, layout: &Layout) -> f64 {
    let g = layout.goal_position();
    (g[0] - state.position[0]).hypot(g[2] - state.position[2])
}

fn project(state: &EnvState, layout: &Layout, target: [f64; 3]) -> [f64; 4] {
    let (dx, dy, dz) = (
        target[0] - state.position[0],
        target[1] - state.position[1],
        target[2] - state.position[2],
    );
    let (s, c) = state.heading.sin_cos();
    let forward = dx * c + dz * s;
    let right = -dx * s + dz * c;
    let h = layout.horizontal_scale();
    [forward / h, dy / layout.height, forward / h, right / h]
}

/// Builds the observation for a state.
pub fn encode(state: &EnvState, config: &EnvConfig) -> Observation {
    let layout = &config.layout;
    let goal = project(state, layout, layout.goal_position());
    let mut entities = vec![goal];
    for &e in &layout.entities {
        entities.push(project(state, layout, layout.cell_center(e)));
    }
    let game_state = match config.id() {
        EnvId::Driving => {
            let p = &config.driving;
            [
                state.speed.abs() / p.max_speed,
                state.velocity[0] / p.max_speed,
                state.velocity[1] / p.max_speed,
                state.velocity[2] / p.max_speed,
                state.angular_velocity / p.max_steer_rate,
            ]
        }
        EnvId::Navigation => {
            let r = &config.navigation;
            [
                if state.airborne { 0.0 } else { 1.0 },
                state.jump_cooldown as f64 / r.jump_cooldown.max(1) as f64,
                state.magazine as f64 / r.magazine_size.max(1) as f64,
                0.0,
                0.0,
            ]
        }
    };
    Observation {
        goal_proj_xy: [goal[0], goal[1]],
        goal_proj_xz: [goal[2], goal[3]],
        entities,
        game_state,
        occupancy: occupancy(state, layout),
    }
}

/// 5×5×5 world-axis-aligned voxel window centered on the agent.
pub fn occupancy(state: &EnvState, layout: &Layout) -> Vec<u8> {
    let (cx, cz) = layout.cell_of(state.position[0], state.position[2]);
    let level = (state.position[1] / layout.cell_size).round() as i64;
    let half = (OCCUPANCY_SIDE / 2) as i64;
    let mut out = Vec::with_capacity(OCCUPANCY_VOXELS);
    for dy in -half..=half {
        for dz in -half..=half {
            for dx in -half..=half {
                let (c, r) = (cx + dx, cz + dz);
                let v = if layout.in_bounds(c, r) {
                    layout.cell(c, r).voxel_at(level + dy)
                } else {
                    Voxel::Obstacle
                };
                out.push(v as u8);
            }
        }
    }
    out
}

/// Advances any environment by one action.
pub fn step(config: &EnvConfig, state: &EnvState, action: &Action) -> Result<Transition> {
    match (config.id(), action) {
        (EnvId::Driving, Action::Continuous(a)) => {
            if a.len() != 2 {
                return Err(Error::Length {
                    context: "driving action".into(),
                    left: 2,
                    right: a.len(),
                });
            }
            Ok(step_driving(config, state, [a[0], a[1]]))
        }
        (EnvId::Navigation, Action::Discrete(a)) => {
            let a = NavAction::from_index(*a)?;
            Ok(step_navigation(config, state, a))
        }
        (id, a) => Err(Error::Format(format!("action {a:?} does not fit the {id} env"))),
    }
}

/// Owning wrapper around a shared config and a private state.
#[derive(Clone, Debug)]
pub struct Env {
    config: Arc<EnvConfig>,
    state: EnvState,
}

impl Env {
    pub fn new(config: Arc<EnvConfig>, seed: u64) -> Self {
        let (state, _) = reset(&config, seed);
        Self { config, state }
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        let (state, obs) = reset(&self.config, seed);
        self.state = state;
        obs
    }

    pub fn step(&mut self, action: &Action) -> Result<Transition> {
        let t = step(&self.config, &self.state, action)?;
        self.state = t.state.clone();
        Ok(t)
    }

    pub fn observe(&self) -> Observation {
        encode(&self.state, &self.config)
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn config(&self) -> &Arc<EnvConfig> {
        &self.config
    }

    pub fn action_spec(&self) -> ActionSpec {
        self.config.action_spec()
    }

    pub fn done(&self) -> bool {
        self.state.done
    }
}

/// Shared reward and termination bookkeeping for both games.
pub(crate) fn finish_step(config: &EnvConfig, prev: &EnvState, mut next: EnvState, at_goal: bool) -> Transition {
    let layout = &config.layout;
    next.step = prev.step + 1;
    let mut reward = (goal_distance(prev, layout) - goal_distance(&next, layout)) / layout.diagonal();
    if at_goal {
        reward += 1.0;
        next.reached_goal = true;
        next.done = true;
    }
    if next.step >= config.horizon {
        next.done = true;
    }
    let observation = encode(&next, config);
    Transition {
        done: next.done,
        state: next,
        observation,
        task_reward: reward,
    }
}

/// Stepping a finished episode changes nothing.
pub(crate) fn sticky_done(config: &EnvConfig, state: &EnvState) -> Transition {
    Transition {
        state: state.clone(),
        observation: encode(state, config),
        task_reward: 0.0,
        done: true,
    }
}
