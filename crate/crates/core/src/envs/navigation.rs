//! Discrete navigation toy on a grid with four headings.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::{finish_step, sticky_done, Cell, EnvConfig, EnvState, Transition};
use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NavAction {
    Forward = 0,
    Backward = 1,
    RotateRight = 2,
    RotateLeft = 3,
    Jump = 4,
    Shoot = 5,
    SidestepRight = 6,
    SidestepLeft = 7,
    Noop = 8,
}

impl NavAction {
    pub const ALL: [NavAction; NUM_ACTIONS] = [
        NavAction::Forward,
        NavAction::Backward,
        NavAction::RotateRight,
        NavAction::RotateLeft,
        NavAction::Jump,
        NavAction::Shoot,
        NavAction::SidestepRight,
        NavAction::SidestepLeft,
        NavAction::Noop,
    ];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Format(format!("navigation action {i} >= {NUM_ACTIONS}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NavAction::Forward => "forward",
            NavAction::Backward => "backward",
            NavAction::RotateRight => "rotate_right",
            NavAction::RotateLeft => "rotate_left",
            NavAction::Jump => "jump",
            NavAction::Shoot => "shoot",
            NavAction::SidestepRight => "sidestep_right",
            NavAction::SidestepLeft => "sidestep_left",
            NavAction::Noop => "noop",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavigationRules {
    /// Ticks before another jump is allowed.
    pub jump_cooldown: u32,
    pub magazine_size: u32,
}

impl Default for NavigationRules {
    fn default() -> Self {
        Self {
            jump_cooldown: 1,
            magazine_size: 10,
        }
    }
}

/// Quarter-turn index in `0..4` (0 = +x, 1 = +z, ...).
pub fn heading_index(heading: f64) -> usize {
    ((heading / FRAC_PI_2).round() as i64).rem_euclid(4) as usize
}

pub fn snap_heading(heading: f64) -> f64 {
    heading_index(heading) as f64 * FRAC_PI_2
}

/// Grid step for a quarter-turn index.
pub fn direction(index: usize) -> (i64, i64) {
    [(1, 0), (0, 1), (-1, 0), (0, -1)][index % 4]
}

pub fn step_navigation(config: &EnvConfig, state: &EnvState, action: NavAction) -> Transition {
    if state.done {
        return sticky_done(config, state);
    }
    let layout = &config.layout;
    let rules = &config.navigation;
    let mut next = state.clone();
    next.jump_cooldown = state.jump_cooldown.saturating_sub(1);
    next.airborne = false;
    next.position[1] = 0.0;

    let h = heading_index(state.heading);
    let (cx, cz) = layout.cell_of(state.position[0], state.position[2]);
    let fwd = direction(h);
    let right = direction(h + 1);
    let mut target = None;
    match action {
        NavAction::Forward => target = Some((cx + fwd.0, cz + fwd.1)),
        NavAction::Backward => target = Some((cx - fwd.0, cz - fwd.1)),
        NavAction::SidestepRight => target = Some((cx + right.0, cz + right.1)),
        NavAction::SidestepLeft => target = Some((cx - right.0, cz - right.1)),
        NavAction::RotateRight => next.heading = ((h + 1) % 4) as f64 * FRAC_PI_2,
        NavAction::RotateLeft => next.heading = ((h + 3) % 4) as f64 * FRAC_PI_2,
        NavAction::Jump => {
            if state.jump_cooldown == 0 {
                next.jump_cooldown = rules.jump_cooldown;
                next.airborne = true;
                let one = (cx + fwd.0, cz + fwd.1);
                let two = (cx + 2 * fwd.0, cz + 2 * fwd.1);
                if layout.cell(one.0, one.1) == Cell::Low {
                    if layout.cell(two.0, two.1).walkable() {
                        target = Some(two);
                    }
                } else {
                    target = Some(one);
                }
            }
        }
        NavAction::Shoot => {
            next.magazine = match state.magazine {
                0 => rules.magazine_size,
                m => m - 1,
            };
        }
        NavAction::Noop => {}
    }
    if let Some((c, r)) = target {
        if layout.cell(c, r).walkable() {
            let p = layout.cell_center((c as usize, r as usize));
            next.position[0] = p[0];
            next.position[2] = p[2];
        }
    }
    if next.airborne {
        next.position[1] = layout.cell_size;
    }
    next.velocity = [0.0; 3];
    let at_goal = layout.cell_of(next.position[0], next.position[2]) == (layout.goal.0 as i64, layout.goal.1 as i64);
    finish_step(config, state, next, at_goal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{encode, reset, EnvId};

    fn city() -> EnvConfig {
        EnvConfig::reference(EnvId::Navigation)
    }

    #[test]
    fn noop_changes_nothing_but_the_clock() {
        let cfg = city();
        let (s, _) = reset(&cfg, 0);
        let t = step_navigation(&cfg, &s, NavAction::Noop);
        assert_eq!(t.state.position, s.position);
        assert_eq!(t.state.heading, s.heading);
        assert_eq!(t.state.step, 1);
        assert_eq!(t.task_reward, 0.0);
    }

    #[test]
    fn jump_on_cooldown_is_a_noop_and_counts_down() {
        let cfg = city();
        let (mut s, _) = reset(&cfg, 0);
        s.jump_cooldown = 1;
        let t = step_navigation(&cfg, &s, NavAction::Jump);
        assert_eq!(t.state.position, s.position);
        assert_eq!(t.state.jump_cooldown, 0);
        assert!(!t.state.airborne);
    }

    #[test]
    fn forward_into_wall_keeps_occupancy_except_cooldown() {
        let cfg = city();
        let (mut s, _) = reset(&cfg, 0);
        // (1, 12) facing west into the border
        s.position = cfg.layout.cell_center((1, 12));
        s.heading = std::f64::consts::PI;
        s.jump_cooldown = 1;
        let before = encode(&s, &cfg);
        let t = step_navigation(&cfg, &s, NavAction::Forward);
        assert_eq!(t.state.position, s.position);
        assert_eq!(t.observation.occupancy, before.occupancy);
        assert_eq!(t.observation.goal_proj_xz, before.goal_proj_xz);
        assert_ne!(t.observation.game_state[1], before.game_state[1]);
    }

    #[test]
    fn jump_clears_a_low_obstacle() {
        let cfg = city();
        let (mut s, _) = reset(&cfg, 0);
        // low obstacle at (3, 9); stand at (3, 10) facing north (-z)
        assert_eq!(cfg.layout.cell(3, 9), Cell::Low);
        s.position = cfg.layout.cell_center((3, 10));
        s.heading = 3.0 * FRAC_PI_2;
        let blocked = step_navigation(&cfg, &s, NavAction::Forward);
        assert_eq!(blocked.state.position, s.position);
        let t = step_navigation(&cfg, &s, NavAction::Jump);
        assert_eq!(cfg.layout.cell_of(t.state.position[0], t.state.position[2]), (3, 8));
        assert!(t.state.airborne);
        assert_eq!(t.state.jump_cooldown, cfg.navigation.jump_cooldown);
        assert_eq!(t.observation.game_state[0], 0.0);
    }

    #[test]
    fn rotations_and_sidesteps() {
        let cfg = city();
        let (s, _) = reset(&cfg, 0);
        let r = step_navigation(&cfg, &s, NavAction::RotateRight);
        assert_eq!(heading_index(r.state.heading), 1);
        let l = step_navigation(&cfg, &s, NavAction::RotateLeft);
        assert_eq!(heading_index(l.state.heading), 3);
        // facing +x, right is +z
        let sr = step_navigation(&cfg, &s, NavAction::SidestepRight);
        assert_eq!(sr.state.position[2], s.position[2] + 1.0);
        let sl = step_navigation(&cfg, &s, NavAction::SidestepLeft);
        assert_eq!(sl.state.position[2], s.position[2] - 1.0);
    }

    #[test]
    fn shoot_only_touches_the_magazine() {
        let cfg = city();
        let (s, _) = reset(&cfg, 0);
        let t = step_navigation(&cfg, &s, NavAction::Shoot);
        assert_eq!(t.state.magazine, cfg.navigation.magazine_size - 1);
        assert_eq!(t.state.position, s.position);
    }

    #[test]
    fn reaching_goal_cell_terminates() {
        let cfg = city();
        let (mut s, _) = reset(&cfg, 0);
        let (gc, gr) = cfg.layout.goal;
        s.position = cfg.layout.cell_center((gc - 1, gr));
        s.heading = 0.0;
        let t = step_navigation(&cfg, &s, NavAction::Forward);
        assert!(t.done && t.state.reached_goal);
        assert!((t.task_reward - (1.0 + 1.0 / cfg.layout.diagonal())).abs() < 1e-12);
    }
}
