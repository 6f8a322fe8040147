//! Measurement battery: action histograms and divergences, α–action
//! correlation, usage comparison against Policy Fusion, and KDE export.

pub mod divergence;
pub mod histogram;
pub mod kde;
pub mod report;

use serde::{Deserialize, Serialize};

pub use divergence::{chi2, divergences, js, kl, wasserstein1, Divergences};
pub use histogram::{ActionHistogram, Histogram, CONTINUOUS_BINS};
pub use kde::{kde, DensityGrid};

use crate::envs::{reset, step, Action, ActionSpec, EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::experts::Persona;
use crate::nn::{ActionDistribution, SampledAction};
use crate::parallel::{self, Execution};
use crate::policy::PolicyModel;
use crate::trainer::worker_rng;

/// Anything that maps an observation to an action distribution.
pub trait Actor: Sync {
    fn distribution(&self, obs: &Observation) -> Result<ActionDistribution>;
}

/// A policy with a fixed auxiliary input.
pub struct Conditioned<'a> {
    pub policy: &'a PolicyModel,
    pub alpha: Vec<f64>,
}

impl Actor for Conditioned<'_> {
    fn distribution(&self, obs: &Observation) -> Result<ActionDistribution> {
        self.policy.distribution(obs, &self.alpha)
    }
}

/// Policy Fusion: the member probability vectors averaged and renormalized.
pub struct PolicyFusion<'a> {
    members: Vec<Conditioned<'a>>,
}

impl<'a> PolicyFusion<'a> {
    /// Each member is a separately trained single-persona policy, run with
    /// its all-ones input. Discrete action spaces only.
    pub fn new(members: &'a [PolicyModel]) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Usage("policy fusion needs members".into()));
        }
        for m in members {
            if !m.net.action_spec.is_discrete() {
                return Err(Error::UnsupportedSpace(
                    "policy fusion is limited to discrete action spaces".into(),
                ));
            }
        }
        Ok(Self {
            members: members
                .iter()
                .map(|p| Conditioned {
                    policy: p,
                    alpha: vec![1.0; p.n_alpha()],
                })
                .collect(),
        })
    }
}

/// Averages categorical distributions.
pub fn fuse(dists: &[ActionDistribution]) -> Result<ActionDistribution> {
    let mut acc: Vec<f64> = Vec::new();
    for d in dists {
        match d {
            ActionDistribution::Categorical { probs } => {
                if acc.is_empty() {
                    acc = vec![0.0; probs.len()];
                }
                if probs.len() != acc.len() {
                    return Err(Error::Length {
                        context: "fused distributions".into(),
                        left: acc.len(),
                        right: probs.len(),
                    });
                }
                acc.iter_mut().zip(probs).for_each(|(a, p)| *a += p);
            }
            ActionDistribution::SquashedGaussian { .. } => {
                return Err(Error::UnsupportedSpace(
                    "policy fusion is limited to discrete action spaces".into(),
                ))
            }
        }
    }
    let z: f64 = acc.iter().sum();
    Ok(ActionDistribution::Categorical {
        probs: acc.into_iter().map(|a| a / z).collect(),
    })
}

impl Actor for PolicyFusion<'_> {
    fn distribution(&self, obs: &Observation) -> Result<ActionDistribution> {
        let d: Vec<_> = self
            .members
            .iter()
            .map(|m| m.distribution(obs))
            .collect::<Result<_>>()?;
        fuse(&d)
    }
}

/// Samples one fused action.
pub fn policy_fusion_act<R: rand::Rng + ?Sized>(
    fusion: &PolicyFusion<'_>,
    obs: &Observation,
    rng: &mut R,
) -> Result<SampledAction> {
    Ok(fusion.distribution(obs)?.sample(rng))
}

/// Actions of `episodes` sampled episodes. Episode `k` resets with seed
/// `seed + k` and draws from its own stream, so results do not depend on
/// the execution mode.
pub fn run_episodes(
    actor: &dyn Actor,
    env: &EnvConfig,
    episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Vec<Action>>> {
    let ids: Vec<usize> = (0..episodes).collect();
    parallel::map(exec, &ids, |_, &k| {
        let mut rng = worker_rng(seed, 0, k);
        let (mut state, mut obs) = reset(env, seed.wrapping_add(k as u64));
        let mut actions = Vec::new();
        while !state.done {
            let a = actor.distribution(&obs)?.sample(&mut rng).action;
            let t = step(env, &state, &a)?;
            actions.push(a);
            obs = t.observation;
            state = t.state;
        }
        Ok(actions)
    })
    .into_iter()
    .collect()
}

pub fn action_distribution(
    actor: &dyn Actor,
    env: &EnvConfig,
    episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<ActionHistogram> {
    let eps = run_episodes(actor, env, episodes, seed, exec)?;
    ActionHistogram::from_actions(env.action_spec(), eps.iter().flatten())
}

/// Signature action groups in persona order: jump, rotate, sidestep.
pub fn signature_groups() -> Vec<(Persona, &'static [usize])> {
    [Persona::Jump, Persona::Zigzag, Persona::Strafe]
        .into_iter()
        .map(|p| (p, p.signature_actions()))
        .collect()
}

/// Fraction of steps whose action lies in `group`.
pub fn group_fraction(actions: &[Action], group: &[usize]) -> f64 {
    if actions.is_empty() {
        return 0.0;
    }
    actions
        .iter()
        .filter(|a| a.as_discrete().is_some_and(|i| group.contains(&i)))
        .count() as f64
        / actions.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population moments.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std }
    }
}

/// Per-episode signature-group usage, summarized across episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub groups: Vec<String>,
    pub per_episode: Vec<Vec<f64>>,
    pub summary: Vec<MeanStd>,
}

pub fn usage_from_episodes(episodes: &[Vec<Action>]) -> Usage {
    let groups = signature_groups();
    let per_episode: Vec<Vec<f64>> = episodes
        .iter()
        .map(|e| groups.iter().map(|(_, g)| group_fraction(e, g)).collect())
        .collect();
    let summary = (0..groups.len())
        .map(|j| MeanStd::of(&per_episode.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect();
    Usage {
        groups: groups.iter().map(|(p, _)| p.to_string()).collect(),
        per_episode,
        summary,
    }
}

pub fn action_usage(actor: &dyn Actor, env: &EnvConfig, episodes: usize, seed: u64, exec: Execution) -> Result<Usage> {
    if !env.action_spec().is_discrete() {
        return Err(Error::UnsupportedSpace(
            "action usage is defined for the discrete env".into(),
        ));
    }
    Ok(usage_from_episodes(&run_episodes(actor, env, episodes, seed, exec)?))
}

/// Pearson coefficient; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        None
    } else {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    /// Signature groups (rows).
    pub groups: Vec<String>,
    /// `coefficients[group][alpha component]`.
    pub coefficients: Vec<Vec<f64>>,
    /// Set where the coefficient was undefined and reported as 0.
    pub degenerate: Vec<Vec<bool>>,
}

/// Correlates usage (`usage[point][group]`) with the α grid points.
pub fn correlate(alphas: &[Vec<f64>], usage: &[Vec<f64>], groups: Vec<String>) -> Result<CorrelationMatrix> {
    if alphas.len() != usage.len() || alphas.is_empty() {
        return Err(Error::Length {
            context: "correlation grid points".into(),
            left: alphas.len(),
            right: usage.len(),
        });
    }
    let k = alphas[0].len();
    let g = usage[0].len();
    let mut coefficients = vec![vec![0.0; k]; g];
    let mut degenerate = vec![vec![false; k]; g];
    for gi in 0..g {
        let u: Vec<f64> = usage.iter().map(|r| r[gi]).collect();
        for a in 0..k {
            let x: Vec<f64> = alphas.iter().map(|p| p[a]).collect();
            match pearson(&u, &x) {
                Some(c) => coefficients[gi][a] = c,
                None => degenerate[gi][a] = true,
            }
        }
    }
    Ok(CorrelationMatrix {
        groups,
        coefficients,
        degenerate,
    })
}

/// Every point of `values^n`, first component slowest.
pub fn alpha_grid(n: usize, values: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    out
}

/// Usage at every grid point, correlated against each α component.
pub fn persona_correlation(
    policy: &PolicyModel,
    env: &EnvConfig,
    grid: &[Vec<f64>],
    episodes_per_point: usize,
    seed: u64,
    exec: Execution,
) -> Result<CorrelationMatrix> {
    let groups = signature_groups();
    let mut usage = Vec::with_capacity(grid.len());
    for alpha in grid {
        let actor = Conditioned {
            policy,
            alpha: alpha.clone(),
        };
        let eps = run_episodes(&actor, env, episodes_per_point, seed, exec)?;
        let all: Vec<Action> = eps.into_iter().flatten().collect();
        usage.push(groups.iter().map(|(_, g)| group_fraction(&all, g)).collect());
    }
    correlate(grid, &usage, groups.iter().map(|(p, _)| p.to_string()).collect())
}

/// Extreme blends: every pair of personas at full weight, neighbours
/// first, then all of them together when there are more than two.
pub fn blend_alphas(n: usize) -> Vec<Vec<f64>> {
    let mut pairs: Vec<(usize, usize)> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
    for i in 0..n {
        for j in i + 2..n {
            pairs.push((i, j));
        }
    }
    let mut out: Vec<Vec<f64>> = pairs
        .into_iter()
        .map(|(i, j)| {
            let mut a = vec![0.0; n];
            a[i] = 1.0;
            a[j] = 1.0;
            a
        })
        .collect();
    if n > 2 {
        out.push(vec![1.0; n]);
    }
    out
}

/// Usage rows for each blend: the α-conditioned policy, then Policy Fusion
/// over the members whose α component is nonzero. `members[i]` is the
/// single-persona policy for component `i`.
pub fn fusion_compare(
    policy: &PolicyModel,
    members: &[PolicyModel],
    env: &EnvConfig,
    alphas: &[Vec<f64>],
    episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<(String, Vec<f64>, Usage)>> {
    if members.len() != policy.n_alpha() {
        return Err(Error::Usage(format!(
            "policy has {} personas but {} fusion members were given",
            policy.n_alpha(),
            members.len()
        )));
    }
    let mut rows = Vec::new();
    for alpha in alphas {
        let actor = Conditioned {
            policy,
            alpha: alpha.clone(),
        };
        rows.push((
            "multigail".to_string(),
            alpha.clone(),
            action_usage(&actor, env, episodes, seed, exec)?,
        ));
        let chosen: Vec<PolicyModel> = members
            .iter()
            .zip(alpha)
            .filter(|(_, a)| **a > 0.0)
            .map(|(m, _)| m.clone())
            .collect();
        if chosen.is_empty() {
            continue;
        }
        let pf = PolicyFusion::new(&chosen)?;
        rows.push((
            "policy-fusion".to_string(),
            alpha.clone(),
            action_usage(&pf, env, episodes, seed, exec)?,
        ));
    }
    Ok(rows)
}

/// Divergence of an action histogram against each reference.
pub fn divergence_table(
    agent: &ActionHistogram,
    references: &[(String, ActionHistogram)],
) -> Result<Vec<(String, Divergences)>> {
    references
        .iter()
        .map(|(name, h)| Ok((name.clone(), agent.divergences(h)?)))
        .collect()
}

/// Continuous 2-D actions as KDE samples.
pub fn action_points(actions: &[Action], spec: &ActionSpec) -> Result<Vec<[f64; 2]>> {
    if *spec != (ActionSpec::Continuous { dims: 2 }) {
        return Err(Error::UnsupportedSpace(
            "kde needs two continuous action dimensions".into(),
        ));
    }
    Ok(actions
        .iter()
        .filter_map(|a| a.as_continuous().map(|v| [v[0], v[1]]))
        .collect())
}
