//! Demonstration datasets: recording, line-delimited storage, sampling.
//!
//! File layout: one JSON object per line. The first line is the header
//! (`record = "header"`); every other line is a step record
//! `{record: "step", episode_id, t, observation, action}`. The final step of
//! an episode carries the terminal observation with `action = null`.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Expert, Persona};
use crate::envs::{reset, step, Action, ActionSpec, EnvConfig, EnvId, Observation};
use crate::error::{Error, Result};

pub const DEMO_FORMAT_VERSION: u32 = 1;
pub const MAX_EPISODE_ATTEMPTS: usize = 10;

/// One episode `s₁, a₁, …, a_{T−1}, s_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoEpisode {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemonstrationSet {
    pub persona: String,
    pub env: EnvId,
    pub action_spec: ActionSpec,
    pub episodes: Vec<DemoEpisode>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase", deny_unknown_fields)]
enum DemoRecord {
    Header {
        format_version: u32,
        persona: String,
        env: EnvId,
        action_spec: ActionSpec,
        episodes: usize,
        sample_count: usize,
    },
    Step {
        episode_id: usize,
        t: usize,
        observation: Observation,
        action: Option<Action>,
    },
}

impl DemonstrationSet {
    pub fn sample_count(&self) -> usize {
        self.episodes.iter().map(|e| e.actions.len()).sum()
    }

    /// Flattened `(observation, action)` pairs in episode order.
    pub fn pairs(&self) -> impl Iterator<Item = (&Observation, &Action)> {
        self.episodes.iter().flat_map(|e| e.observations.iter().zip(&e.actions))
    }

    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.episodes.iter().flat_map(|e| e.actions.iter())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.episodes.iter().enumerate() {
            if e.observations.len() != e.actions.len() + 1 {
                return Err(Error::Format(format!(
                    "episode {i}: {} observations for {} actions",
                    e.observations.len(),
                    e.actions.len()
                )));
            }
            for o in &e.observations {
                o.validate()?;
            }
            for a in &e.actions {
                self.action_spec.validate_action(a)?;
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header = DemoRecord::Header {
            format_version: DEMO_FORMAT_VERSION,
            persona: self.persona.clone(),
            env: self.env,
            action_spec: self.action_spec,
            episodes: self.episodes.len(),
            sample_count: self.sample_count(),
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for (id, e) in self.episodes.iter().enumerate() {
            for (t, obs) in e.observations.iter().enumerate() {
                let rec = DemoRecord::Step {
                    episode_id: id,
                    t,
                    observation: obs.clone(),
                    action: e.actions.get(t).cloned(),
                };
                out.push_str(&serde_json::to_string(&rec)?);
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty demonstration file".into()))??;
        let (persona, env, action_spec, n_episodes, n_samples) = match serde_json::from_str(&first)? {
            DemoRecord::Header {
                format_version,
                persona,
                env,
                action_spec,
                episodes,
                sample_count,
            } => {
                if format_version != DEMO_FORMAT_VERSION {
                    return Err(Error::Format(format!(
                        "unsupported demo format_version {format_version}"
                    )));
                }
                (persona, env, action_spec, episodes, sample_count)
            }
            DemoRecord::Step { .. } => return Err(Error::Format("first record is not a header".into())),
        };
        let mut episodes: Vec<DemoEpisode> = Vec::with_capacity(n_episodes);
        let mut closed = true;
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let DemoRecord::Step {
                episode_id,
                t,
                observation,
                action,
            } = serde_json::from_str(&line)?
            else {
                return Err(Error::Format(format!("line {}: second header", n + 2)));
            };
            if closed {
                if episode_id != episodes.len() || t != 0 {
                    return Err(Error::Format(format!(
                        "line {}: expected episode {} t 0",
                        n + 2,
                        episodes.len()
                    )));
                }
                episodes.push(DemoEpisode {
                    observations: Vec::new(),
                    actions: Vec::new(),
                });
            }
            let n_open = episodes.len();
            let ep = episodes.last_mut().unwrap();
            if episode_id + 1 != n_open || t != ep.observations.len() {
                return Err(Error::Format(format!("line {}: records out of order", n + 2)));
            }
            ep.observations.push(observation);
            closed = action.is_none();
            if let Some(a) = action {
                ep.actions.push(a);
            }
        }
        if !closed {
            return Err(Error::Format("last episode has no terminal observation".into()));
        }
        let set = Self {
            persona,
            env,
            action_spec,
            episodes,
        };
        if set.episodes.len() != n_episodes || set.sample_count() != n_samples {
            return Err(Error::Format("header counts disagree with records".into()));
        }
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Hex SHA-256 of the serialized file.
    pub fn checksum(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.to_jsonl()?.as_bytes())))
    }
}

/// Rolls full expert episodes until at least `n_samples` pairs are stored.
/// Episodes that miss the goal are re-rolled.
pub fn record_demos(persona: Persona, config: &EnvConfig, n_samples: usize, seed: u64) -> Result<DemonstrationSet> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    let mut expert = Expert::new(persona, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::new();
    let mut total = 0;
    while total < n_samples {
        let mut attempt = 0;
        let ep = loop {
            attempt += 1;
            if let Some(ep) = roll_episode(&mut expert, config, rng.gen(), &mut rng)? {
                break ep;
            }
            if attempt >= MAX_EPISODE_ATTEMPTS {
                return Err(Error::ExpertFailed {
                    persona: persona.to_string(),
                    attempts: attempt,
                });
            }
        };
        total += ep.actions.len();
        episodes.push(ep);
    }
    Ok(DemonstrationSet {
        persona: persona.to_string(),
        env: config.id(),
        action_spec: config.action_spec(),
        episodes,
    })
}

fn roll_episode(
    expert: &mut Expert,
    config: &EnvConfig,
    env_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<DemoEpisode>> {
    expert.reset(rng);
    let (mut state, obs) = reset(config, env_seed);
    let mut ep = DemoEpisode {
        observations: vec![obs],
        actions: Vec::new(),
    };
    while !state.done {
        let obs = ep.observations.last().unwrap();
        let action = expert.act(&config.layout, &state, obs, rng)?;
        let t = step(config, &state, &action)?;
        ep.actions.push(action);
        ep.observations.push(t.observation);
        state = t.state;
    }
    Ok(state.reached_goal.then_some(ep))
}

/// Uniform sampling without replacement inside each pass over the data.
#[derive(Clone, Debug)]
pub struct ExpertSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl ExpertSampler {
    pub fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.order.is_empty() {
            return Err(Error::Config("empty demonstration set".into()));
        }
        if batch_size > self.order.len() {
            return Err(Error::Config(format!(
                "batch size {batch_size} exceeds {} demonstration samples",
                self.order.len()
            )));
        }
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let take = (batch_size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        Ok(out)
    }
}
