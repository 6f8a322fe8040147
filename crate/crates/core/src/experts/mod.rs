//! Scripted personas standing in for human demonstrators.
//!
//! Driving personas read only the observation. Navigation personas also
//! consult a breadth-first distance field over the layout, so they always
//! know which neighbouring cells lead toward the goal.

pub mod demos;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use demos::{record_demos, DemoEpisode, DemonstrationSet, ExpertSampler};

use crate::envs::navigation::{direction, heading_index};
use crate::envs::{Action, EnvConfig, EnvId, EnvState, Layout, NavAction, Observation};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Persona {
    Careful,
    Reckless,
    Jump,
    Zigzag,
    Strafe,
}

impl Persona {
    pub const ALL: [Persona; 5] = [
        Persona::Careful,
        Persona::Reckless,
        Persona::Jump,
        Persona::Zigzag,
        Persona::Strafe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Persona::Careful => "careful",
            Persona::Reckless => "reckless",
            Persona::Jump => "jump",
            Persona::Zigzag => "zigzag",
            Persona::Strafe => "strafe",
        }
    }

    pub fn env(self) -> EnvId {
        match self {
            Persona::Careful | Persona::Reckless => EnvId::Driving,
            _ => EnvId::Navigation,
        }
    }

    pub fn for_env(env: EnvId) -> Vec<Persona> {
        Self::ALL.into_iter().filter(|p| p.env() == env).collect()
    }

    /// Navigation action indices that characterize the persona.
    pub fn signature_actions(self) -> &'static [usize] {
        match self {
            Persona::Jump => &[4],
            Persona::Zigzag => &[2, 3],
            Persona::Strafe => &[6, 7],
            _ => &[],
        }
    }

    /// Parses a persona valid for `env`.
    pub fn parse_for(name: &str, env: EnvId) -> Result<Self> {
        let valid = || {
            Self::for_env(env)
                .iter()
                .map(|p| p.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        };
        match name.parse::<Persona>() {
            Ok(p) if p.env() == env => Ok(p),
            _ => Err(Error::UnknownPersona {
                name: name.to_string(),
                valid: valid(),
            }),
        }
    }
}

impl FromStr for Persona {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownPersona {
                name: s.to_string(),
                valid: Self::ALL.map(|p| p.as_str()).join(", "),
            })
    }
}

impl fmt::Display for Persona {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const CAREFUL_ACCEL_MEAN: f64 = 0.3;
pub const CAREFUL_ACCEL_STD: f64 = 0.1;
pub const CAREFUL_STEER_GAIN: f64 = 0.5;
pub const CAREFUL_STEER_LIMIT: f64 = 0.2;
pub const RECKLESS_STEER_GAIN: f64 = 2.0;
pub const RECKLESS_WOBBLE: f64 = 0.8;
/// Wobble angular frequency per step (a 20-step period).
pub const RECKLESS_WOBBLE_FREQ: f64 = std::f64::consts::TAU / 20.0;

/// Signed goal bearing in the agent frame; positive means "turn right".
pub fn goal_bearing(obs: &Observation) -> f64 {
    obs.goal_proj_xz[1].atan2(obs.goal_proj_xz[0])
}

/// Stateless driving policy at step `t`.
pub fn driving_action<R: Rng + ?Sized>(persona: Persona, obs: &Observation, t: usize, rng: &mut R) -> Result<[f64; 2]> {
    let err = goal_bearing(obs);
    match persona {
        Persona::Careful => {
            let n = Normal::new(CAREFUL_ACCEL_MEAN, CAREFUL_ACCEL_STD).expect("valid normal");
            let accel = n.sample(rng).clamp(-1.0, 1.0);
            let steer = (CAREFUL_STEER_GAIN * err).clamp(-CAREFUL_STEER_LIMIT, CAREFUL_STEER_LIMIT);
            Ok([accel, steer])
        }
        Persona::Reckless => {
            let wobble = RECKLESS_WOBBLE * (RECKLESS_WOBBLE_FREQ * t as f64).sin();
            Ok([1.0, (RECKLESS_STEER_GAIN * err + wobble).clamp(-1.0, 1.0)])
        }
        other => Err(Error::UnknownPersona {
            name: other.as_str().into(),
            valid: "careful, reckless".into(),
        }),
    }
}

/// Breadth-first step counts to the goal over walkable cells.
#[derive(Clone, Debug)]
pub struct DistanceField {
    cols: usize,
    rows: usize,
    dist: Vec<u32>,
}

impl DistanceField {
    pub const UNREACHABLE: u32 = u32::MAX;

    pub fn new(layout: &Layout) -> Self {
        let (cols, rows) = (layout.cols, layout.rows);
        let mut dist = vec![Self::UNREACHABLE; cols * rows];
        let mut queue = VecDeque::new();
        let (gc, gr) = layout.goal;
        dist[gr * cols + gc] = 0;
        queue.push_back((gc as i64, gr as i64));
        while let Some((c, r)) = queue.pop_front() {
            let d = dist[r as usize * cols + c as usize];
            for k in 0..4 {
                let (dc, dr) = direction(k);
                let (nc, nr) = (c + dc, r + dr);
                if layout.cell(nc, nr).walkable() {
                    let i = nr as usize * cols + nc as usize;
                    if dist[i] == Self::UNREACHABLE {
                        dist[i] = d + 1;
                        queue.push_back((nc, nr));
                    }
                }
            }
        }
        Self { cols, rows, dist }
    }

    pub fn get(&self, c: i64, r: i64) -> u32 {
        if c < 0 || r < 0 || c >= self.cols as i64 || r >= self.rows as i64 {
            Self::UNREACHABLE
        } else {
            self.dist[r as usize * self.cols + c as usize]
        }
    }

    /// Headings (quarter-turn indices) whose neighbour is strictly closer.
    pub fn improving(&self, c: i64, r: i64) -> Vec<usize> {
        let here = self.get(c, r);
        (0..4)
            .filter(|&k| {
                let (dc, dr) = direction(k);
                self.get(c + dc, r + dr) < here
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

impl Side {
    fn flip(self) -> Self {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    fn rotate(self) -> NavAction {
        match self {
            Side::Left => NavAction::RotateLeft,
            Side::Right => NavAction::RotateRight,
        }
    }

    fn sidestep(self) -> NavAction {
        match self {
            Side::Left => NavAction::SidestepLeft,
            Side::Right => NavAction::SidestepRight,
        }
    }

    fn heading_from(self, h: usize) -> usize {
        match self {
            Side::Left => (h + 3) % 4,
            Side::Right => (h + 1) % 4,
        }
    }
}

/// A persona bound to one environment config, with per-episode memory.
#[derive(Clone, Debug)]
pub struct Expert {
    persona: Persona,
    field: Option<DistanceField>,
    t: usize,
    last: Option<NavAction>,
    side: Side,
    pending: Option<NavAction>,
}

impl Expert {
    pub fn new(persona: Persona, config: &EnvConfig) -> Result<Self> {
        if persona.env() != config.id() {
            return Err(Error::UnknownPersona {
                name: persona.as_str().into(),
                valid: Persona::for_env(config.id())
                    .iter()
                    .map(|p| p.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
        let field = (config.id() == EnvId::Navigation).then(|| DistanceField::new(&config.layout));
        Ok(Self {
            persona,
            field,
            t: 0,
            last: None,
            side: Side::Left,
            pending: None,
        })
    }

    pub fn persona(&self) -> Persona {
        self.persona
    }

    /// Clears episode memory; the starting side is drawn from `rng`.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.t = 0;
        self.last = None;
        self.pending = None;
        self.side = if rng.gen::<bool>() { Side::Left } else { Side::Right };
    }

    pub fn act<R: Rng + ?Sized>(
        &mut self,
        layout: &Layout,
        state: &EnvState,
        obs: &Observation,
        rng: &mut R,
    ) -> Result<Action> {
        let t = self.t;
        self.t += 1;
        match self.persona {
            Persona::Careful | Persona::Reckless => {
                Ok(Action::Continuous(driving_action(self.persona, obs, t, rng)?.to_vec()))
            }
            _ => {
                let a = self.navigate(layout, state, obs, rng);
                self.last = Some(a);
                Ok(Action::Discrete(a.index()))
            }
        }
    }

    fn navigate<R: Rng + ?Sized>(
        &mut self,
        layout: &Layout,
        state: &EnvState,
        obs: &Observation,
        rng: &mut R,
    ) -> NavAction {
        if let Some(a) = self.pending.take() {
            return a;
        }
        let field = self.field.as_ref().expect("navigation expert has a distance field");
        let (c, r) = layout.cell_of(state.position[0], state.position[2]);
        let h = heading_index(state.heading);
        let improving = field.improving(c, r);
        if improving.is_empty() {
            return NavAction::Noop;
        }
        let facing = improving.contains(&h);
        let turn_toward = |rng: &mut R| {
            let right = improving.contains(&((h + 1) % 4));
            let left = improving.contains(&((h + 3) % 4));
            match (left, right) {
                (true, true) => {
                    if rng.gen::<bool>() {
                        NavAction::RotateLeft
                    } else {
                        NavAction::RotateRight
                    }
                }
                (true, false) => NavAction::RotateLeft,
                _ => NavAction::RotateRight,
            }
        };
        match self.persona {
            Persona::Jump => {
                if !facing {
                    turn_toward(rng)
                } else if obs.game_state[1] == 0.0 {
                    NavAction::Jump
                } else {
                    NavAction::Forward
                }
            }
            Persona::Zigzag => {
                if !facing {
                    return turn_toward(rng);
                }
                if self.last != Some(NavAction::Forward) {
                    return NavAction::Forward;
                }
                let side = self.side;
                self.side = side.flip();
                if !improving.contains(&side.heading_from(h)) {
                    // nothing to zig toward: turn and come straight back
                    self.pending = Some(side.flip().rotate());
                }
                side.rotate()
            }
            Persona::Strafe => {
                if !facing {
                    return turn_toward(rng);
                }
                if self.last != Some(NavAction::Forward) {
                    return NavAction::Forward;
                }
                let side = self.side;
                self.side = side.flip();
                let (dc, dr) = direction(side.heading_from(h));
                if layout.cell(c + dc, r + dr).walkable() {
                    side.sidestep()
                } else {
                    side.flip().sidestep()
                }
            }
            _ => unreachable!("driving personas do not navigate"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::reset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs_with_goal(fwd: f64, right: f64) -> Observation {
        let (_, mut o) = reset(&EnvConfig::reference(EnvId::Driving), 0);
        o.goal_proj_xz = [fwd, right];
        o
    }

    #[test]
    fn careful_on_straight_heading_does_not_steer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = driving_action(Persona::Careful, &obs_with_goal(0.5, 0.0), 0, &mut rng).unwrap();
        assert_eq!(a[1], 0.0);
    }

    #[test]
    fn careful_steer_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (f, r) in [(0.1, 0.9), (-0.3, -0.1), (0.0, -1.0)] {
            let a = driving_action(Persona::Careful, &obs_with_goal(f, r), 0, &mut rng).unwrap();
            assert!(a[1].abs() <= CAREFUL_STEER_LIMIT);
            assert!(a[0].abs() <= 1.0);
        }
    }

    #[test]
    fn reckless_always_floors_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in 0..50 {
            let a = driving_action(
                Persona::Reckless,
                &obs_with_goal(0.2, 0.1 * t as f64 - 2.0),
                t,
                &mut rng,
            )
            .unwrap();
            assert_eq!(a[0], 1.0);
        }
    }

    #[test]
    fn jump_persona_follows_cooldown() {
        let cfg = EnvConfig::reference(EnvId::Navigation);
        let mut e = Expert::new(Persona::Jump, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // spawn faces +x, which leads toward the goal
        let (mut s, mut o) = reset(&cfg, 0);
        assert_eq!(e.act(&cfg.layout, &s, &o, &mut rng).unwrap(), Action::Discrete(4));
        s.jump_cooldown = 1;
        o.game_state[1] = 1.0;
        assert_eq!(e.act(&cfg.layout, &s, &o, &mut rng).unwrap(), Action::Discrete(0));
    }

    #[test]
    fn unknown_persona_names_the_valid_ones() {
        match Persona::parse_for("speedy", EnvId::Navigation) {
            Err(Error::UnknownPersona { valid, .. }) => assert_eq!(valid, "jump, zigzag, strafe"),
            other => panic!("{other:?}"),
        }
        assert!(Persona::parse_for("careful", EnvId::Navigation).is_err());
        assert_eq!(Persona::parse_for("careful", EnvId::Driving).unwrap(), Persona::Careful);
    }

    #[test]
    fn distance_field_on_reference_city() {
        let l = Layout::reference(EnvId::Navigation);
        let f = DistanceField::new(&l);
        let (gc, gr) = l.goal;
        assert_eq!(f.get(gc as i64, gr as i64), 0);
        // open path: Manhattan distance from spawn
        let (sc, sr) = l.spawn;
        assert_eq!(f.get(sc as i64, sr as i64), (gc.abs_diff(sc) + gr.abs_diff(sr)) as u32);
        assert_eq!(f.get(0, 0), DistanceField::UNREACHABLE);
    }
}
