use std::collections::VecDeque;
use std::sync::Arc;

use multigail::discriminators::{style_reward, validate_alpha, DiscriminatorSet};
use multigail::envs::{reset, step, Action, ActionSpec, EnvConfig, EnvState, Layout, Observation};
use multigail::eval::histogram::bin_of;
use multigail::eval::CONTINUOUS_BINS;
use multigail::nn::EncoderBatch;
use multigail::parallel::Execution;
use multigail::policy::{PolicyModel, TrainedModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::protocol::{CheckpointMeta, EpisodeStats, ErrorCode, Frame, Pose, RollingHistogram, ServerMessage};
use crate::{Result, ServerError};

pub const HISTOGRAM_WINDOW: usize = 200;

/// A loaded checkpoint, shared read-only by every session.
pub struct ServedModel {
    pub env: EnvConfig,
    pub policy: PolicyModel,
    pub discriminators: DiscriminatorSet,
    pub meta: CheckpointMeta,
    pub deterministic: bool,
}

impl ServedModel {
    pub fn new(model: TrainedModel, layout: Option<Layout>) -> Result<Self> {
        let discriminators = model
            .discriminators
            .ok_or_else(|| ServerError::Model("checkpoint has no discriminators to score with".into()))?;
        let mut env = EnvConfig::reference(model.meta.env);
        if let Some(l) = layout {
            env = EnvConfig::new(l);
        }
        if env.layout.name != model.meta.layout {
            return Err(ServerError::Model(format!(
                "checkpoint was trained on layout `{}`, not `{}`",
                model.meta.layout, env.layout.name
            )));
        }
        if env.n_entities() != model.meta.n_entities || env.action_spec() != model.meta.action_spec {
            return Err(ServerError::Model("checkpoint does not match the environment".into()));
        }
        Ok(Self {
            env,
            policy: model.policy,
            discriminators,
            meta: CheckpointMeta {
                format: model.meta.format,
                layout: model.meta.layout,
                personas: model.meta.personas,
                iteration: model.meta.iteration,
            },
            deterministic: false,
        })
    }

    pub fn n_personas(&self) -> usize {
        self.meta.personas.len()
    }
}

/// Rolling action counts over the last `window` actions.
#[derive(Clone, Debug)]
pub struct ActionWindow {
    spec: ActionSpec,
    window: usize,
    recent: VecDeque<Vec<usize>>,
    counts: Vec<Vec<u64>>,
}

impl ActionWindow {
    pub fn new(spec: ActionSpec, window: usize) -> Self {
        let counts = match spec {
            ActionSpec::Discrete { count } => vec![vec![0; count]],
            ActionSpec::Continuous { dims } => vec![vec![0; CONTINUOUS_BINS]; dims],
        };
        Self {
            spec,
            window,
            recent: VecDeque::with_capacity(window + 1),
            counts,
        }
    }

    fn bins(&self, action: &Action) -> Vec<usize> {
        match (self.spec, action) {
            (ActionSpec::Discrete { .. }, Action::Discrete(i)) => vec![*i],
            (_, Action::Continuous(v)) => v.iter().map(|&x| bin_of(x, CONTINUOUS_BINS)).collect(),
            _ => unreachable!("action validated against the spec"),
        }
    }

    pub fn push(&mut self, action: &Action) {
        let bins = self.bins(action);
        for (row, &b) in self.counts.iter_mut().zip(&bins) {
            row[b] += 1;
        }
        self.recent.push_back(bins);
        if self.recent.len() > self.window {
            let old = self.recent.pop_front().unwrap();
            for (row, b) in self.counts.iter_mut().zip(old) {
                row[b] -= 1;
            }
        }
    }

    pub fn snapshot(&self) -> RollingHistogram {
        RollingHistogram {
            window: self.window,
            samples: self.recent.len(),
            counts: self.counts.clone(),
        }
    }
}

/// One client's environment, α and statistics.
pub struct Session {
    pub id: u64,
    model: Arc<ServedModel>,
    seed: u64,
    state: EnvState,
    obs: Observation,
    alpha: Vec<f64>,
    pending: Option<Vec<f64>>,
    rng: ChaCha8Rng,
    tick: u64,
    episode: u64,
    return_g: f64,
    return_s: f64,
    histogram: ActionWindow,
}

/// The protocol error for an α that is not a valid input for `n` personas.
pub fn alpha_error(values: &[f64], n: usize) -> Option<ServerMessage> {
    if values.len() != n {
        return Some(ServerMessage::error(
            ErrorCode::AlphaArity,
            format!("expected {n} alpha values, got {}", values.len()),
        ));
    }
    validate_alpha(values, n)
        .err()
        .map(|e| ServerMessage::error(ErrorCode::AlphaRange, e.to_string()))
}

impl Session {
    pub fn new(id: u64, model: Arc<ServedModel>, seed: u64, alpha: Option<Vec<f64>>) -> Result<Self> {
        let n = model.n_personas();
        let alpha = alpha.unwrap_or_else(|| vec![1.0; n]);
        validate_alpha(&alpha, n)?;
        let (state, obs) = reset(&model.env, seed);
        Ok(Self {
            id,
            histogram: ActionWindow::new(model.env.action_spec(), HISTOGRAM_WINDOW),
            model,
            seed,
            state,
            obs,
            alpha,
            pending: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tick: 0,
            episode: 0,
            return_g: 0.0,
            return_s: 0.0,
        })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn hello(&self, tick_rate: f64) -> ServerMessage {
        ServerMessage::Hello {
            protocol: crate::PROTOCOL_VERSION,
            session_id: self.id,
            env_id: self.model.env.id().to_string(),
            n_personas: self.model.n_personas(),
            checkpoint_meta: self.model.meta.clone(),
            tick_rate,
            alpha: self.alpha.clone(),
        }
    }

    /// Validates and queues a new α; the next step uses it. A later call
    /// before that step replaces it.
    pub fn set_alpha(&mut self, values: Vec<f64>) -> ServerMessage {
        if let Some(e) = alpha_error(&values, self.model.n_personas()) {
            return e;
        }
        self.pending = Some(values.clone());
        ServerMessage::Ack {
            values,
            effective_tick: self.tick + 1,
        }
    }

    /// Ends the running episode at the next tick.
    pub fn request_reset(&mut self) {
        self.state.done = true;
    }

    fn end_episode(&mut self) -> ServerMessage {
        let msg = ServerMessage::EpisodeEnd {
            session_id: self.id,
            episode: self.episode,
            tick: self.tick,
            stats: EpisodeStats {
                steps: self.state.step,
                reached_goal: self.state.reached_goal,
                return_g: self.return_g,
                return_s: self.return_s,
            },
        };
        self.episode += 1;
        let (s, o) = reset(&self.model.env, self.seed.wrapping_add(self.episode));
        self.state = s;
        self.obs = o;
        self.return_g = 0.0;
        self.return_s = 0.0;
        msg
    }

    /// Advances one step. Returns the frame, preceded by an `episode_end`
    /// when the previous episode finished.
    pub fn advance(&mut self) -> Result<Vec<ServerMessage>> {
        let mut out = Vec::with_capacity(2);
        if self.state.done {
            out.push(self.end_episode());
        }
        if let Some(a) = self.pending.take() {
            self.alpha = a;
        }
        let m = &*self.model;
        let sampled = m.policy.act(&self.obs, &self.alpha, m.deterministic, &mut self.rng)?;
        let spec = m.env.action_spec();
        let batch = EncoderBatch::single(&self.obs, &spec.action_features(&sampled.action))?;
        let scores: Vec<f64> = m
            .discriminators
            .scores(&batch, Execution::Sequential)?
            .into_iter()
            .map(|s| s[0])
            .collect();
        let r_s = style_reward(&scores, &self.alpha)?;
        let t = step(&m.env, &self.state, &sampled.action)?;
        self.tick += 1;
        self.return_g += t.task_reward;
        self.return_s += r_s;
        self.histogram.push(&sampled.action);
        let layout = &m.env.layout;
        let action = match &sampled.action {
            Action::Discrete(i) => vec![*i as f64],
            Action::Continuous(v) => v.clone(),
        };
        out.push(ServerMessage::Frame(Frame {
            session_id: self.id,
            tick: self.tick,
            episode: self.episode,
            step: t.state.step,
            agent: Pose {
                position: t.state.position,
                heading: t.state.heading,
                speed: t.state.speed,
                airborne: t.state.airborne,
            },
            goal: layout.goal_position(),
            entities: layout.entities.iter().map(|&e| layout.cell_center(e)).collect(),
            action,
            scores,
            r_g: t.task_reward,
            r_s,
            alpha: self.alpha.clone(),
            histogram: self.histogram.snapshot(),
        }));
        self.state = t.state;
        self.obs = t.observation;
        Ok(out)
    }
}
