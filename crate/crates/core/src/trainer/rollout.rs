use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminators::{discriminator_batch, style_reward, DiscriminatorSet};
use crate::envs::{reset, step, Action, EnvConfig, EnvState, Observation};
use crate::error::{Error, Result};
use crate::nn::{EncoderBatch, Network, ParameterStore};
use crate::parallel::Execution;
use crate::policy::PolicyModel;
use crate::ppo::total_reward;

/// Each component drawn independently and uniformly from `alpha_set`.
pub fn sample_alpha<R: Rng + ?Sized>(n: usize, alpha_set: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if alpha_set.is_empty() {
        return Err(Error::Config("alpha_set is empty".into()));
    }
    Ok((0..n).map(|_| alpha_set[rng.gen_range(0..alpha_set.len())]).collect())
}

/// Independent stream for worker `worker` at `iteration`.
pub fn worker_rng(seed: u64, iteration: usize, worker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 20) | worker as u64);
    rng
}

/// One episode with everything the updates need.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub alpha: Vec<f64>,
    pub seed: u64,
    /// `s₁ … s_T`, one more than the actions.
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub raws: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    /// Value estimates for `s₁ … s_T` (empty without a value network).
    pub values: Vec<f64>,
    pub r_g: Vec<f64>,
    pub r_s: Vec<f64>,
    pub r_total: Vec<f64>,
    /// Raw discriminator scores `[member][t]`.
    pub scores: Vec<Vec<f64>>,
    pub reached_goal: bool,
    pub terminal_state: EnvState,
    pub goal: [f64; 3],
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Terminal flags for advantage estimation: only reaching the goal ends
    /// the return; the horizon is a truncation.
    pub fn dones(&self) -> Vec<bool> {
        let mut d = vec![false; self.len()];
        if let Some(last) = d.last_mut() {
            *last = self.reached_goal;
        }
        d
    }

    /// Value of the state after the last action, zero at the goal.
    pub fn bootstrap_value(&self) -> f64 {
        if self.reached_goal {
            0.0
        } else {
            self.values.last().copied().unwrap_or(0.0)
        }
    }

    pub fn policy_inputs(&self) -> Result<EncoderBatch> {
        let first = &self.observations[0];
        let mut b = EncoderBatch::with_capacity(
            crate::envs::BASE_SELF_DIM + self.alpha.len(),
            first.entities.len(),
            self.observations.len(),
        );
        for o in &self.observations {
            b.push(o, &self.alpha)?;
        }
        Ok(b)
    }
}

/// Optional learning signals attached to a rollout.
#[derive(Clone, Copy)]
pub struct RolloutCritics<'a> {
    pub value: Option<(&'a Network, &'a ParameterStore)>,
    pub discriminators: Option<&'a DiscriminatorSet>,
    pub w_g: f64,
    pub w_s: f64,
}

impl Default for RolloutCritics<'_> {
    fn default() -> Self {
        Self {
            value: None,
            discriminators: None,
            w_g: 1.0,
            w_s: 1.0,
        }
    }
}

/// Runs one episode from `reset(env_seed)`. The policy acts step by step;
/// values and discriminator scores are evaluated in one batch afterwards,
/// which gives the same numbers as querying them per step.
pub fn rollout<R: Rng + ?Sized>(
    policy: &PolicyModel,
    env: &EnvConfig,
    alpha: &[f64],
    env_seed: u64,
    deterministic: bool,
    critics: RolloutCritics<'_>,
    rng: &mut R,
) -> Result<Trajectory> {
    let (mut state, obs) = reset(env, env_seed);
    let mut t = Trajectory {
        alpha: alpha.to_vec(),
        seed: env_seed,
        observations: vec![obs],
        actions: Vec::new(),
        raws: Vec::new(),
        log_probs: Vec::new(),
        values: Vec::new(),
        r_g: Vec::new(),
        r_s: Vec::new(),
        r_total: Vec::new(),
        scores: Vec::new(),
        reached_goal: false,
        terminal_state: state.clone(),
        goal: env.layout.goal_position(),
    };
    while !state.done {
        let s = policy.act(t.observations.last().unwrap(), alpha, deterministic, rng)?;
        let tr = step(env, &state, &s.action)?;
        t.actions.push(s.action);
        t.raws.push(s.raw);
        t.log_probs.push(s.log_prob);
        t.r_g.push(tr.task_reward);
        t.observations.push(tr.observation);
        state = tr.state;
    }
    t.reached_goal = state.reached_goal;
    t.terminal_state = state;
    if let Some((net, params)) = critics.value {
        t.values = net.scalars(params, &t.policy_inputs()?)?;
    }
    let n = t.len();
    match critics.discriminators {
        Some(d) => {
            let batch = discriminator_batch(
                &d.net.action_spec,
                env.n_entities(),
                t.observations.iter().zip(&t.actions),
            )?;
            t.scores = d.scores(&batch, Execution::Sequential)?;
            let mut col = vec![0.0; d.len()];
            for i in 0..n {
                for (m, c) in col.iter_mut().enumerate() {
                    *c = t.scores[m][i];
                }
                t.r_s.push(style_reward(&col, alpha)?);
            }
        }
        None => t.r_s = vec![0.0; n],
    }
    t.r_total = t
        .r_g
        .iter()
        .zip(&t.r_s)
        .map(|(&g, &s)| total_reward(g, s, critics.w_g, critics.w_s))
        .collect();
    Ok(t)
}

/// Episode-level summary for metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub length: usize,
    pub r_g: f64,
    pub r_s: f64,
    pub reached_goal: bool,
}

impl From<&Trajectory> for EpisodeSummary {
    fn from(t: &Trajectory) -> Self {
        Self {
            length: t.len(),
            r_g: t.r_g.iter().sum(),
            r_s: t.r_s.iter().sum(),
            reached_goal: t.reached_goal,
        }
    }
}
