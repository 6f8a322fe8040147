//! The training loop: sample α per episode, roll out `m` trajectories in
//! parallel, update every discriminator on the same policy samples, then
//! take the PPO step.

pub mod rollout;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use rollout::{rollout, sample_alpha, worker_rng, EpisodeSummary, RolloutCritics, Trajectory};

use crate::discriminators::{audit_alpha_blindness, discriminator_batch, DiscriminatorSet, MemberStats};
use crate::envs::{EnvConfig, BASE_SELF_DIM};
use crate::error::{Error, Result};
use crate::experts::{DemonstrationSet, ExpertSampler};
use crate::nn::{AdamConfig, EncoderBatch, Network, NetworkConfig, NetworkRole};
use crate::parallel::{self, Execution};
use crate::policy::{ModelMeta, PolicyModel, TrainedModel, MODEL_FORMAT};
use crate::ppo::{gae, ppo_update, ActorCritic, PpoBatch, PpoConfig, PpoStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha_set: Vec<f64>,
    /// Trajectories per iteration (`m`).
    pub trajectories: usize,
    /// Episode horizon; `None` uses the layout's.
    pub horizon: Option<usize>,
    pub iterations: usize,
    pub seed: u64,
    /// Save a checkpoint every this many iterations (0: final only).
    pub checkpoint_every: usize,
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub stop_on_plateau: bool,
    /// Discriminator steps per iteration.
    pub disc_steps: usize,
    /// Policy (and expert) rows per discriminator step; `None` uses every
    /// policy sample of the iteration.
    pub disc_batch_size: Option<usize>,
    pub disc_learning_rate: f64,
    pub w_gp: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_set: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            trajectories: 10,
            horizon: None,
            iterations: 500,
            seed: 0,
            checkpoint_every: 0,
            plateau_window: 50,
            plateau_tolerance: 0.02,
            stop_on_plateau: false,
            disc_steps: 1,
            disc_batch_size: None,
            disc_learning_rate: 3e-4,
            w_gp: 10.0,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_set.is_empty() || self.alpha_set.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config(
                "train.alpha_set must be a non-empty subset of [0, 1]".into(),
            ));
        }
        if self.trajectories == 0 {
            return Err(Error::Config("train.trajectories must be >= 1".into()));
        }
        if self.horizon == Some(0) {
            return Err(Error::Config("train.horizon must be positive".into()));
        }
        if self.plateau_window == 0 {
            return Err(Error::Config("train.plateau_window must be positive".into()));
        }
        if self.disc_batch_size == Some(0) {
            return Err(Error::Config("train.disc_batch_size must be positive".into()));
        }
        if !(self.disc_learning_rate > 0.0) || !(self.w_gp >= 0.0) {
            return Err(Error::Config(
                "train.disc_learning_rate must be > 0 and train.w_gp >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// True when the mean over the last `window` values moved less than `tol`
/// (relative) from the mean over the `window` before it.
pub fn plateau_reached(history: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || history.len() < 2 * window {
        return false;
    }
    let n = history.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let recent = mean(&history[n - window..]);
    let before = mean(&history[n - 2 * window..n - window]);
    if before == 0.0 {
        return recent == 0.0;
    }
    ((recent - before) / before).abs() < tol
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub samples: usize,
    pub episodes: usize,
    pub mean_episode_length: f64,
    pub goal_rate: f64,
    pub mean_r_g: f64,
    pub mean_r_s: f64,
    pub disc_loss: f64,
    pub discriminators: Vec<MemberStats>,
    pub ppo: PpoStats,
    /// Counts per `alpha_set` value, over all sampled components.
    pub alpha_histogram: Vec<usize>,
    pub same_batch: bool,
    pub alpha_blind: bool,
    pub discarded_episodes: usize,
}

/// Where a run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub dir: PathBuf,
}

impl RunOutputs {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint(&self, iteration: usize) -> PathBuf {
        self.dir.join(format!("checkpoint-{iteration:06}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn last_good(&self) -> PathBuf {
        self.dir.join("last-good.ckpt")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub plateau: bool,
    pub checkpoints: Vec<PathBuf>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub ppo: PpoConfig,
    pub env: Arc<EnvConfig>,
    pub ac: ActorCritic,
    pub discriminators: DiscriminatorSet,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
    expert_inputs: Vec<EncoderBatch>,
    samplers: Vec<ExpertSampler>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        ppo: PpoConfig,
        network: NetworkConfig,
        env: EnvConfig,
        demos: &[DemonstrationSet],
    ) -> Result<Self> {
        config.validate()?;
        ppo.validate()?;
        network.validate()?;
        if demos.is_empty() {
            return Err(Error::Config("training needs at least one demonstration set".into()));
        }
        let mut env = env;
        if let Some(h) = config.horizon {
            env.horizon = h;
        }
        let spec = env.action_spec();
        let ne = env.n_entities();
        let mut expert_inputs = Vec::new();
        for d in demos {
            if d.env != env.id() || d.action_spec != spec {
                return Err(Error::Config(format!(
                    "demonstrations `{}` were recorded for {} but training runs {}",
                    d.persona,
                    d.env,
                    env.id()
                )));
            }
            if d.sample_count() == 0 {
                return Err(Error::Config(format!("demonstrations `{}` are empty", d.persona)));
            }
            expert_inputs.push(discriminator_batch(&spec, ne, d.pairs())?);
        }
        let personas: Vec<String> = demos.iter().map(|d| d.persona.clone()).collect();
        let n = personas.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pnet = Network::new(network.clone(), NetworkRole::Policy, spec, n, ne)?;
        let vnet = Network::new(network.clone(), NetworkRole::Value, spec, n, ne)?;
        let pparams = pnet.init(&mut rng);
        let vparams = vnet.init(&mut rng);
        let ac = ActorCritic::new(pnet, pparams, vnet, vparams)?;
        let dopt = AdamConfig {
            lr: config.disc_learning_rate,
            ..AdamConfig::default()
        };
        let discriminators = DiscriminatorSet::new(network, spec, ne, &personas, dopt, config.w_gp, &mut rng)?;
        let samplers = expert_inputs.iter().map(|b| ExpertSampler::new(b.rows)).collect();
        Ok(Self {
            config,
            ppo,
            env: Arc::new(env),
            ac,
            discriminators,
            iteration: 0,
            loss_history: Vec::new(),
            expert_inputs,
            samplers,
            rng,
        })
    }

    pub fn n_personas(&self) -> usize {
        self.discriminators.len()
    }

    pub fn policy_model(&self) -> PolicyModel {
        PolicyModel {
            net: self.ac.policy.clone(),
            params: self.ac.policy_params.clone(),
        }
    }

    pub fn model(&self) -> TrainedModel {
        TrainedModel {
            meta: ModelMeta {
                format: MODEL_FORMAT.into(),
                env: self.env.id(),
                layout: self.env.layout.name.clone(),
                personas: self.discriminators.personas(),
                network: self.ac.policy.config.clone(),
                action_spec: self.env.action_spec(),
                n_entities: self.env.n_entities(),
                iteration: self.iteration,
                w_gp: self.config.w_gp,
            },
            policy: self.policy_model(),
            value: Some((self.ac.value.clone(), self.ac.value_params.clone())),
            discriminators: Some(self.discriminators.clone()),
        }
    }

    /// Collects `m` trajectories with per-episode α.
    pub fn collect(&mut self) -> Result<(Vec<Trajectory>, usize)> {
        let n = self.n_personas();
        let m = self.config.trajectories;
        let mut jobs = Vec::with_capacity(m);
        for _ in 0..m {
            let alpha = sample_alpha(n, &self.config.alpha_set, &mut self.rng)?;
            jobs.push((alpha, self.rng.gen::<u64>()));
        }
        let policy = self.policy_model();
        let critics = RolloutCritics {
            value: Some((&self.ac.value, &self.ac.value_params)),
            discriminators: Some(&self.discriminators),
            w_g: self.ppo.w_g,
            w_s: self.ppo.w_s,
        };
        let (seed, it, env) = (self.config.seed, self.iteration, &*self.env);
        let results = parallel::map(self.config.execution, &jobs, |w, (alpha, env_seed)| {
            let mut rng = worker_rng(seed, it, w);
            rollout(&policy, env, alpha, *env_seed, false, critics, &mut rng)
        });
        let mut out = Vec::with_capacity(m);
        let mut discarded = 0;
        for r in results {
            match r {
                Ok(t) if !t.is_empty() => out.push(t),
                Ok(_) | Err(Error::NonFinite { .. }) => discarded += 1,
                Err(e) => return Err(e),
            }
        }
        if out.is_empty() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                detail: "every trajectory of the iteration was discarded".into(),
            });
        }
        Ok((out, discarded))
    }

    fn update_discriminators(&mut self, buffer: &[Trajectory]) -> Result<(Vec<MemberStats>, bool, bool)> {
        let spec = self.env.action_spec();
        let ne = self.env.n_entities();
        let rows: Vec<(usize, usize)> = buffer
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |s| (i, s)))
            .collect();
        let min_demo = self.expert_inputs.iter().map(|b| b.rows).min().unwrap_or(0);
        let k = self
            .config
            .disc_batch_size
            .unwrap_or(rows.len())
            .min(rows.len())
            .min(min_demo);
        let mut same_batch = true;
        let mut alpha_blind = true;
        let mut stats = Vec::new();
        for _ in 0..self.config.disc_steps {
            let chosen: Vec<(usize, usize)> = if k == rows.len() {
                rows.clone()
            } else {
                rand::seq::index::sample(&mut self.rng, rows.len(), k)
                    .into_iter()
                    .map(|i| rows[i])
                    .collect()
            };
            let policy = discriminator_batch(
                &spec,
                ne,
                chosen
                    .iter()
                    .map(|&(i, s)| (&buffer[i].observations[s], &buffer[i].actions[s])),
            )?;
            // audit against the policy's own view of the same rows
            let mut view = EncoderBatch::new(BASE_SELF_DIM + self.n_personas(), ne);
            for &(i, s) in &chosen {
                view.push(&buffer[i].observations[s], &buffer[i].alpha)?;
            }
            let actions: Vec<_> = chosen.iter().map(|&(i, s)| buffer[i].actions[s].clone()).collect();
            alpha_blind &= audit_alpha_blindness(&spec, &policy, &view, &actions).is_ok();
            let mut experts = Vec::with_capacity(self.samplers.len());
            for (sampler, full) in self.samplers.iter_mut().zip(&self.expert_inputs) {
                let idx = sampler.next_batch(k, &mut self.rng)?;
                experts.push(full.select(&idx));
            }
            stats = self.discriminators.update(&experts, &policy, self.config.execution)?;
            let first = &stats[0].policy_checksum;
            same_batch &= stats.iter().all(|s| &s.policy_checksum == first) && *first == policy.checksum();
        }
        Ok((stats, same_batch, alpha_blind))
    }

    fn ppo_batch(&self, buffer: &[Trajectory]) -> Result<PpoBatch> {
        let n = self.n_personas();
        let ne = self.env.n_entities();
        let total: usize = buffer.iter().map(|t| t.len()).sum();
        let mut b = PpoBatch {
            inputs: EncoderBatch::with_capacity(BASE_SELF_DIM + n, ne, total),
            actions: Vec::with_capacity(total),
            raws: Vec::with_capacity(total),
            log_probs_old: Vec::with_capacity(total),
            advantages: Vec::with_capacity(total),
            returns: Vec::with_capacity(total),
        };
        for t in buffer {
            let (adv, ret) = gae(
                &t.r_total,
                &t.values[..t.len()],
                &t.dones(),
                t.bootstrap_value(),
                self.ppo.gamma,
                self.ppo.lambda,
            )?;
            for s in 0..t.len() {
                b.inputs.push(&t.observations[s], &t.alpha)?;
            }
            b.actions.extend(t.actions.iter().cloned());
            b.raws.extend(t.raws.iter().cloned());
            b.log_probs_old.extend_from_slice(&t.log_probs);
            b.advantages.extend(adv);
            b.returns.extend(ret);
        }
        Ok(b)
    }

    /// One full iteration of the algorithm. The buffer lives only inside
    /// this call.
    pub fn step(&mut self) -> Result<IterationMetrics> {
        let (buffer, discarded) = self.collect()?;
        let (disc_stats, same_batch, alpha_blind) = self.update_discriminators(&buffer)?;
        let batch = self.ppo_batch(&buffer)?;
        let mut ppo_rng = worker_rng(self.config.seed, self.iteration, usize::MAX >> 44);
        let ppo = ppo_update(&mut self.ac, &batch, &self.ppo, &mut ppo_rng)?;
        if !self.ac.policy_params.iter().all(|(_, t)| t.is_finite())
            || !self.ac.value_params.iter().all(|(_, t)| t.is_finite())
        {
            return Err(Error::Diverged {
                iteration: self.iteration,
                detail: "policy or value parameters became non-finite".into(),
            });
        }
        let disc_loss = disc_stats.iter().map(|s| s.loss).sum::<f64>() / disc_stats.len() as f64;
        let losses_finite = disc_loss.is_finite() && ppo.policy_loss.is_finite() && ppo.value_loss.is_finite();
        if !losses_finite {
            return Err(Error::Diverged {
                iteration: self.iteration,
                detail: format!("disc {disc_loss}, policy {}, value {}", ppo.policy_loss, ppo.value_loss),
            });
        }
        self.loss_history.push(disc_loss);
        let episodes = buffer.len();
        let samples = batch.len();
        let mut alpha_histogram = vec![0; self.config.alpha_set.len()];
        for t in &buffer {
            for a in &t.alpha {
                if let Some(i) = self.config.alpha_set.iter().position(|v| v == a) {
                    alpha_histogram[i] += 1;
                }
            }
        }
        let metrics = IterationMetrics {
            iteration: self.iteration,
            samples,
            episodes,
            mean_episode_length: samples as f64 / episodes as f64,
            goal_rate: buffer.iter().filter(|t| t.reached_goal).count() as f64 / episodes as f64,
            mean_r_g: buffer.iter().map(|t| t.r_g.iter().sum::<f64>()).sum::<f64>() / episodes as f64,
            mean_r_s: buffer.iter().map(|t| t.r_s.iter().sum::<f64>()).sum::<f64>() / episodes as f64,
            disc_loss,
            discriminators: disc_stats,
            ppo,
            alpha_histogram,
            same_batch,
            alpha_blind,
            discarded_episodes: discarded,
        };
        self.iteration += 1;
        Ok(metrics)
    }

    /// Runs until the iteration budget or (optionally) a discriminator-loss
    /// plateau. With `outputs`, writes the metrics log and checkpoints; on a
    /// numerical failure the last good parameters are saved before the
    /// error is returned.
    pub fn run(
        &mut self,
        outputs: Option<&RunOutputs>,
        mut on_iteration: impl FnMut(&IterationMetrics),
    ) -> Result<TrainSummary> {
        let mut log = match outputs {
            Some(o) => {
                std::fs::create_dir_all(&o.dir)?;
                Some(std::io::BufWriter::new(std::fs::File::create(o.metrics())?))
            }
            None => None,
        };
        let mut checkpoints = Vec::new();
        let mut plateau = false;
        while self.iteration < self.config.iterations {
            let last_good = self.model();
            let m = match self.step() {
                Ok(m) => m,
                Err(e) => {
                    if let (Some(o), Error::Diverged { .. } | Error::NonFinite { .. }) = (outputs, &e) {
                        last_good.save(&o.last_good())?;
                    }
                    return Err(e);
                }
            };
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            on_iteration(&m);
            if let Some(o) = outputs {
                let every = self.config.checkpoint_every;
                if every > 0 && self.iteration % every == 0 {
                    let p = o.checkpoint(self.iteration);
                    self.model().save(&p)?;
                    checkpoints.push(p);
                }
            }
            if plateau_reached(
                &self.loss_history,
                self.config.plateau_window,
                self.config.plateau_tolerance,
            ) {
                plateau = true;
                if self.config.stop_on_plateau {
                    break;
                }
            }
        }
        if let Some(o) = outputs {
            let p = o.final_checkpoint();
            self.model().save(&p)?;
            checkpoints.push(p);
        }
        Ok(TrainSummary {
            iterations: self.iteration,
            plateau,
            checkpoints,
        })
    }
}

/// Hex SHA-256 of a file.
pub fn file_checksum(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(format!("{:x}", Sha256::digest(std::fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_from_singleton_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(sample_alpha(3, &[1.0], &mut rng).unwrap(), vec![1.0; 3]);
        }
        assert!(sample_alpha(2, &[], &mut rng).is_err());
    }

    #[test]
    fn plateau_detection() {
        let flat: Vec<f64> = (0..100).map(|i| 1.0 + 0.001 * (i % 3) as f64).collect();
        assert!(plateau_reached(&flat, 50, 0.02));
        let falling: Vec<f64> = (0..100).map(|i| 2.0 - 0.01 * i as f64).collect();
        assert!(!plateau_reached(&falling, 50, 0.02));
        assert!(!plateau_reached(&flat[..99], 50, 0.02));
    }

    #[test]
    fn worker_streams_differ() {
        let a: u64 = worker_rng(1, 0, 0).gen();
        let b: u64 = worker_rng(1, 0, 1).gen();
        let c: u64 = worker_rng(1, 1, 0).gen();
        let a2: u64 = worker_rng(1, 0, 0).gen();
        assert_eq!(a, a2);
        assert!(a != b && a != c && b != c);
    }
}
