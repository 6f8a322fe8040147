use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OCCUPANCY_SIDE: usize = 5;
pub const OCCUPANCY_VOXELS: usize = OCCUPANCY_SIDE * OCCUPANCY_SIDE * OCCUPANCY_SIDE;
pub const OCCUPANCY_CATEGORIES: usize = 5;
pub const GAME_STATE_DIM: usize = 5;
pub const ENTITY_DIM: usize = 4;
/// Goal projections plus game state: the part of the self features every
/// network sees.
pub const BASE_SELF_DIM: usize = 4 + GAME_STATE_DIM;

/// Semantic voxel categories of the occupancy map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Voxel {
    Empty = 0,
    Ground = 1,
    Obstacle = 2,
    Goal = 3,
    Hazard = 4,
}

/// Network-facing view of the world around the agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub goal_proj_xy: [f64; 2],
    pub goal_proj_xz: [f64; 2],
    pub entities: Vec<[f64; ENTITY_DIM]>,
    pub game_state: [f64; GAME_STATE_DIM],
    /// 5×5×5 categories indexed `(dy * 5 + dz) * 5 + dx`, centered on the agent.
    pub occupancy: Vec<u8>,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        if self.occupancy.len() != OCCUPANCY_VOXELS {
            return Err(Error::shape(
                "observation occupancy",
                &[OCCUPANCY_VOXELS],
                &[self.occupancy.len()],
            ));
        }
        if let Some(c) = self.occupancy.iter().find(|&&c| c as usize >= OCCUPANCY_CATEGORIES) {
            return Err(Error::Format(format!("occupancy category {c} out of range")));
        }
        let finite = self
            .goal_proj_xy
            .iter()
            .chain(&self.goal_proj_xz)
            .chain(&self.game_state)
            .chain(self.entities.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::non_finite("observation", "feature vector"));
        }
        Ok(())
    }

    /// Goal projections and game state, in network order.
    pub fn base_features(&self) -> [f64; BASE_SELF_DIM] {
        let mut out = [0.0; BASE_SELF_DIM];
        out[..2].copy_from_slice(&self.goal_proj_xy);
        out[2..4].copy_from_slice(&self.goal_proj_xz);
        out[4..].copy_from_slice(&self.game_state);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActionSpec {
    Continuous { dims: usize },
    Discrete { count: usize },
}

impl ActionSpec {
    /// Width of the discriminator's action feature block.
    pub fn feature_dim(&self) -> usize {
        match *self {
            ActionSpec::Continuous { dims } => dims,
            ActionSpec::Discrete { count } => count,
        }
    }

    /// Width of the policy output layer.
    pub fn output_dim(&self) -> usize {
        self.feature_dim()
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpec::Discrete { .. })
    }

    pub fn validate_action(&self, action: &Action) -> Result<()> {
        match (self, action) {
            (ActionSpec::Continuous { dims }, Action::Continuous(v)) => {
                if v.len() != *dims {
                    return Err(Error::Length {
                        context: "continuous action".into(),
                        left: *dims,
                        right: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite() || x.abs() > 1.0) {
                    return Err(Error::Format(format!("continuous action {v:?} outside [-1, 1]")));
                }
                Ok(())
            }
            (ActionSpec::Discrete { count }, Action::Discrete(a)) => {
                if a >= count {
                    return Err(Error::Format(format!("discrete action {a} >= {count}")));
                }
                Ok(())
            }
            _ => Err(Error::Format(format!("action {action:?} does not match {self:?}"))),
        }
    }

    /// Features appended to the discriminator's self block: one-hot for
    /// discrete actions, raw values for continuous ones.
    pub fn action_features(&self, action: &Action) -> Vec<f64> {
        match (self, action) {
            (ActionSpec::Discrete { count }, Action::Discrete(a)) => {
                let mut v = vec![0.0; *count];
                v[*a] = 1.0;
                v
            }
            (_, Action::Continuous(v)) => v.clone(),
            (ActionSpec::Continuous { dims }, Action::Discrete(_)) => vec![0.0; *dims],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }

    pub fn as_continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(v) => Some(v),
            Action::Discrete(_) => None,
        }
    }
}
