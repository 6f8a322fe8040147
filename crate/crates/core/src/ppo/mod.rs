//! Combined reward, generalized advantage estimation and the clipped PPO
//! update for the policy and its separate value network.
//!
//! The loss gradients with respect to the network outputs (logits, or the
//! pre-squash mean) are derived by hand and fed into the tape as seeds; the
//! state-independent log-std gets its gradient directly.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpec};
use crate::error::{Error, Result};
use crate::nn::network::log_softmax;
use crate::nn::{
    adam_step, AdamConfig, AdamState, EncoderBatch, GradientTape, Gradients, Network, ParameterStore, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub w_g: f64,
    pub w_s: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip_epsilon: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    /// Global gradient-norm clip per network; `0` disables it.
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            w_g: 1.0,
            w_s: 1.0,
            gamma: 0.99,
            lambda: 0.95,
            clip_epsilon: 0.2,
            epochs: 4,
            minibatch_size: 256,
            value_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 3e-4,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.gamma) {
            return Err(Error::Config(format!("ppo.gamma = {} must be in (0, 1]", self.gamma)));
        }
        if !unit(self.lambda) {
            return Err(Error::Config(format!("ppo.lambda = {} must be in (0, 1]", self.lambda)));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config("ppo.clip_epsilon must be > 0".into()));
        }
        if self.epochs == 0 || self.minibatch_size == 0 {
            return Err(Error::Config("ppo.epochs and ppo.minibatch_size must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) || self.max_grad_norm < 0.0 {
            return Err(Error::Config(
                "ppo.learning_rate must be > 0 and max_grad_norm >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// `w_G · r_G + w_S · r_S`.
pub fn total_reward(r_g: f64, r_s: f64, w_g: f64, w_s: f64) -> f64 {
    w_g * r_g + w_s * r_s
}

/// Advantages and returns for one trajectory. `last_value` bootstraps the
/// step after the final one and is ignored when that step is terminal.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Length {
            context: "gae inputs".into(),
            left: n,
            right: if values.len() != n { values.len() } else { dones.len() },
        });
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts to mean 0 and scales to unit (population) deviation. A constant
/// input maps to all zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 0.0 { (*a - mean) / std } else { 0.0 };
    }
}

/// Flattened on-policy samples ready for the update.
#[derive(Clone, Debug)]
pub struct PpoBatch {
    /// Policy/value inputs, auxiliary input included.
    pub inputs: EncoderBatch,
    pub actions: Vec<Action>,
    /// Pre-squash samples (continuous); empty vectors for discrete actions.
    pub raws: Vec<Vec<f64>>,
    pub log_probs_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.inputs.rows;
        for (what, len) in [
            ("actions", self.actions.len()),
            ("raws", self.raws.len()),
            ("log_probs_old", self.log_probs_old.len()),
            ("advantages", self.advantages.len()),
            ("returns", self.returns.len()),
        ] {
            if len != n {
                return Err(Error::Length {
                    context: format!("ppo batch {what}"),
                    left: n,
                    right: len,
                });
            }
        }
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> PpoBatch {
        PpoBatch {
            inputs: self.inputs.select(idx),
            actions: idx.iter().map(|&i| self.actions[i].clone()).collect(),
            raws: idx.iter().map(|&i| self.raws[i].clone()).collect(),
            log_probs_old: idx.iter().map(|&i| self.log_probs_old[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
            returns: idx.iter().map(|&i| self.returns[i]).collect(),
        }
    }
}

/// Scalar pieces of the PPO objective on one minibatch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLoss {
    pub surrogate: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Per-row log-probability and entropy plus their output gradients.
struct RowTerms {
    log_prob: f64,
    entropy: f64,
    /// d log π / d output row
    dlp: Vec<f64>,
    /// d H / d output row
    dh: Vec<f64>,
    /// d log π / d log σ (continuous only)
    dlp_logstd: Vec<f64>,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn row_terms(spec: &ActionSpec, out: &[f64], log_std: &[f64], action: &Action, raw: &[f64]) -> Result<RowTerms> {
    match (spec, action) {
        (ActionSpec::Discrete { .. }, Action::Discrete(a)) => {
            let lsm = log_softmax(out);
            let p: Vec<f64> = lsm.iter().map(|l| l.exp()).collect();
            let h: f64 = -p.iter().zip(&lsm).map(|(p, l)| p * l).sum::<f64>();
            let dlp = (0..out.len()).map(|j| if j == *a { 1.0 } else { 0.0 } - p[j]).collect();
            let dh = (0..out.len()).map(|j| -p[j] * (lsm[j] + h)).collect();
            Ok(RowTerms {
                log_prob: lsm[*a],
                entropy: h,
                dlp,
                dh,
                dlp_logstd: Vec::new(),
            })
        }
        (ActionSpec::Continuous { dims }, Action::Continuous(_)) => {
            if raw.len() != *dims {
                return Err(Error::Length {
                    context: "pre-squash sample".into(),
                    left: *dims,
                    right: raw.len(),
                });
            }
            let mut lp = 0.0;
            let mut h = 0.0;
            let mut dlp = Vec::with_capacity(*dims);
            let mut dls = Vec::with_capacity(*dims);
            for d in 0..*dims {
                let s = log_std[d].exp();
                let z = (raw[d] - out[d]) / s;
                lp += -0.5 * z * z - log_std[d] - HALF_LN_2PI - crate::nn::network::log_one_minus_tanh_sq(raw[d]);
                h += log_std[d] + 0.5 + HALF_LN_2PI;
                dlp.push(z / s);
                dls.push(z * z - 1.0);
            }
            Ok(RowTerms {
                log_prob: lp,
                entropy: h,
                dlp,
                dh: vec![0.0; *dims],
                dlp_logstd: dls,
            })
        }
        _ => Err(Error::Format(format!("action {action:?} does not match {spec:?}"))),
    }
}

/// Loss and gradients for one minibatch. Advantages are used as given.
pub fn minibatch_loss(
    policy: &Network,
    policy_params: &ParameterStore,
    value: &Network,
    value_params: &ParameterStore,
    mb: &PpoBatch,
    cfg: &PpoConfig,
) -> Result<(PpoLoss, Gradients, Gradients)> {
    mb.check()?;
    let m = mb.len();
    if m == 0 {
        return Err(Error::Usage("empty ppo minibatch".into()));
    }
    let mf = m as f64;
    let spec = policy.action_spec;
    let mut ptape = GradientTape::new(policy_params);
    let pf = policy.forward(&mut ptape, &mb.inputs)?;
    let out = ptape.value(pf.output).clone();
    let width = out.cols();
    let log_std: Vec<f64> = match spec {
        ActionSpec::Continuous { .. } => policy_params.get("head.log_std")?.data().to_vec(),
        ActionSpec::Discrete { .. } => Vec::new(),
    };
    let eps = cfg.clip_epsilon;
    let mut seed = vec![0.0; m * width];
    let mut g_logstd = vec![0.0; log_std.len()];
    let mut loss = PpoLoss::default();
    let mut clipped = 0usize;
    for r in 0..m {
        let row = &out.data()[r * width..(r + 1) * width];
        let t = row_terms(&spec, row, &log_std, &mb.actions[r], &mb.raws[r])?;
        let log_ratio = t.log_prob - mb.log_probs_old[r];
        let ratio = log_ratio.exp();
        if !ratio.is_finite() {
            return Err(Error::non_finite("ppo ratio", format!("row {r}: {ratio}")));
        }
        let a = mb.advantages[r];
        let unclipped = ratio * a;
        let clipped_v = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
        let surr = unclipped.min(clipped_v);
        if (ratio - 1.0).abs() > eps {
            clipped += 1;
        }
        loss.surrogate -= surr / mf;
        loss.entropy += t.entropy / mf;
        loss.approx_kl += ((ratio - 1.0) - log_ratio) / mf;
        // d(-surr/m)/d lp is nonzero only where the unclipped branch is active
        let g_lp = if unclipped <= clipped_v { -unclipped / mf } else { 0.0 };
        let g_h = -cfg.entropy_coef / mf;
        for j in 0..width {
            seed[r * width + j] = g_lp * t.dlp[j] + g_h * t.dh[j];
        }
        for (d, g) in g_logstd.iter_mut().enumerate() {
            *g += g_lp * t.dlp_logstd[d] + g_h;
        }
    }
    loss.clip_fraction = clipped as f64 / mf;
    let mut pgrads = ptape.backward_seeded(&[(pf.output, Tensor::new(out.shape().to_vec(), seed)?)])?;
    if !g_logstd.is_empty() {
        let idx = policy_params.index_of("head.log_std")?;
        for (dst, g) in pgrads.get_mut(idx).data_mut().iter_mut().zip(&g_logstd) {
            *dst += g;
        }
    }

    let mut vtape = GradientTape::new(value_params);
    let vf = value.forward(&mut vtape, &mb.inputs)?;
    let v = vtape.value(vf.output).data().to_vec();
    let mut vseed = vec![0.0; m];
    for r in 0..m {
        let diff = v[r] - mb.returns[r];
        loss.value += diff * diff / mf;
        vseed[r] = cfg.value_coef * 2.0 * diff / mf;
    }
    let vgrads = vtape.backward_seeded(&[(vf.output, Tensor::new(vec![m, 1], vseed)?)])?;
    loss.total = loss.surrogate + cfg.value_coef * loss.value - cfg.entropy_coef * loss.entropy;
    Ok((loss, pgrads, vgrads))
}

/// Averaged statistics of one full update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub minibatches: usize,
    pub skipped: usize,
}

/// Trainable policy and value parameters with their optimizer states.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub policy: Network,
    pub policy_params: ParameterStore,
    pub policy_adam: AdamState,
    pub value: Network,
    pub value_params: ParameterStore,
    pub value_adam: AdamState,
}

impl ActorCritic {
    pub fn new(
        policy: Network,
        policy_params: ParameterStore,
        value: Network,
        value_params: ParameterStore,
    ) -> Result<Self> {
        policy.check_store(&policy_params)?;
        value.check_store(&value_params)?;
        Ok(Self {
            policy_adam: AdamState::new(&policy_params),
            value_adam: AdamState::new(&value_params),
            policy,
            policy_params,
            value,
            value_params,
        })
    }
}

/// `epochs` passes of shuffled minibatch steps. Advantages are normalized
/// over the whole batch first. A minibatch whose ratio or gradients go
/// non-finite is skipped and counted.
pub fn ppo_update<R: Rng + ?Sized>(
    ac: &mut ActorCritic,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    cfg.validate()?;
    batch.check()?;
    if batch.is_empty() {
        return Err(Error::Usage("empty ppo batch".into()));
    }
    let mut batch = batch.clone();
    normalize_advantages(&mut batch.advantages);
    let adam = cfg.adam();
    let mut stats = PpoStats::default();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let mb = batch.select(chunk);
            let res = minibatch_loss(&ac.policy, &ac.policy_params, &ac.value, &ac.value_params, &mb, cfg);
            let (loss, mut pg, mut vg) = match res {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    stats.skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !pg.is_finite() || !vg.is_finite() {
                stats.skipped += 1;
                continue;
            }
            if cfg.max_grad_norm > 0.0 {
                pg.clip_global_norm(cfg.max_grad_norm);
                vg.clip_global_norm(cfg.max_grad_norm);
            }
            adam_step(&mut ac.policy_params, &pg, &mut ac.policy_adam, &adam, true)?;
            adam_step(&mut ac.value_params, &vg, &mut ac.value_adam, &adam, true)?;
            stats.policy_loss += loss.surrogate;
            stats.value_loss += loss.value;
            stats.entropy += loss.entropy;
            stats.approx_kl += loss.approx_kl;
            stats.clip_fraction += loss.clip_fraction;
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        let k = stats.minibatches as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.approx_kl /= k;
        stats.clip_fraction /= k;
    }
    Ok(stats)
}
