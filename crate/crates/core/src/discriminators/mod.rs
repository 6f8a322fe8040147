//! One discriminator per persona, the least-squares adversarial update with
//! a gradient penalty on expert samples, and the α-weighted style reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpec, Observation, BASE_SELF_DIM};
use crate::error::{Error, Result};
use crate::nn::penalty::record_gradient_penalty;
use crate::nn::{
    adam_step, AdamConfig, AdamState, EncoderBatch, GradientTape, Gradients, Network, NetworkConfig, NetworkRole,
    ParameterStore, Tensor,
};
use crate::parallel::{self, Execution};

/// Per-member reward term: `max(0, 1 − ¼(D − 1)²)`.
pub fn style_term(score: f64) -> f64 {
    (1.0 - 0.25 * (score - 1.0) * (score - 1.0)).max(0.0)
}

/// `Σ αᵢ · max(0, 1 − ¼(Dᵢ − 1)²)` over raw discriminator scores.
pub fn style_reward(scores: &[f64], alpha: &[f64]) -> Result<f64> {
    if scores.len() != alpha.len() {
        return Err(Error::Length {
            context: "style reward scores vs alpha".into(),
            left: scores.len(),
            right: alpha.len(),
        });
    }
    Ok(scores.iter().zip(alpha).map(|(&s, &a)| a * style_term(s)).sum())
}

/// Checks that every component lies in `[0, 1]`.
pub fn validate_alpha(alpha: &[f64], n: usize) -> Result<()> {
    if alpha.len() != n {
        return Err(Error::Length {
            context: "alpha".into(),
            left: n,
            right: alpha.len(),
        });
    }
    if let Some(a) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("alpha component {a} outside [0, 1]")));
    }
    Ok(())
}

/// Discriminator input for `(s, a)` pairs: observation features with the
/// action block in the extra slot. Nothing else can enter.
pub fn discriminator_batch<'a, I>(spec: &ActionSpec, n_entities: usize, pairs: I) -> Result<EncoderBatch>
where
    I: IntoIterator<Item = (&'a Observation, &'a Action)>,
{
    let mut b = EncoderBatch::new(BASE_SELF_DIM + spec.feature_dim(), n_entities);
    for (o, a) in pairs {
        spec.validate_action(a)?;
        b.push(o, &spec.action_features(a))?;
    }
    Ok(b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorMember {
    pub persona: String,
    pub params: ParameterStore,
    pub adam: AdamState,
}

/// Loss terms of one member update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemberStats {
    pub persona: String,
    pub loss: f64,
    pub expert_term: f64,
    pub policy_term: f64,
    pub penalty: f64,
    pub expert_score: f64,
    pub policy_score: f64,
    /// Fraction classified correctly at the 0 threshold.
    pub accuracy: f64,
    /// Checksum of the policy samples this member consumed.
    pub policy_checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSet {
    pub net: Network,
    pub members: Vec<DiscriminatorMember>,
    pub optimizer: AdamConfig,
    pub w_gp: f64,
}

/// Loss, its pieces, and parameter gradients for one member.
pub fn member_loss(
    net: &Network,
    params: &ParameterStore,
    expert: &EncoderBatch,
    policy: &EncoderBatch,
    w_gp: f64,
) -> Result<(MemberStats, Gradients)> {
    if expert.rows == 0 || policy.rows == 0 {
        return Err(Error::Usage(
            "discriminator update needs expert and policy samples".into(),
        ));
    }
    let (ne, np) = (expert.rows, policy.rows);
    let batch = expert.concat(policy)?;
    let mut tape = GradientTape::new(params);
    let fp = net.forward(&mut tape, &batch)?;
    let (z1, z2) = fp.disc_pre.expect("discriminator head");
    let penalty = record_gradient_penalty(&mut tape, z1, z2, ne)?;
    let d = tape.value(fp.output).data().to_vec();
    let gp = tape.value(penalty).data()[0];
    let (de, dp) = d.split_at(ne);
    let expert_term = de.iter().map(|x| (x - 1.0).powi(2)).sum::<f64>() / ne as f64;
    let policy_term = dp.iter().map(|x| (x + 1.0).powi(2)).sum::<f64>() / np as f64;
    let loss = expert_term + policy_term + 0.5 * w_gp * gp;
    if !loss.is_finite() {
        return Err(Error::non_finite("discriminator loss", format!("{loss}")));
    }
    let seed: Vec<f64> = de
        .iter()
        .map(|x| 2.0 * (x - 1.0) / ne as f64)
        .chain(dp.iter().map(|x| 2.0 * (x + 1.0) / np as f64))
        .collect();
    let seeds = [
        (fp.output, Tensor::new(vec![ne + np, 1], seed)?),
        (penalty, Tensor::scalar(0.5 * w_gp)),
    ];
    let grads = tape.backward_seeded(&seeds)?;
    let correct = de.iter().filter(|&&x| x > 0.0).count() + dp.iter().filter(|&&x| x < 0.0).count();
    Ok((
        MemberStats {
            persona: String::new(),
            loss,
            expert_term,
            policy_term,
            penalty: gp,
            expert_score: de.iter().sum::<f64>() / ne as f64,
            policy_score: dp.iter().sum::<f64>() / np as f64,
            accuracy: correct as f64 / (ne + np) as f64,
            policy_checksum: policy.checksum(),
        },
        grads,
    ))
}

impl DiscriminatorSet {
    pub fn new<R: Rng + ?Sized>(
        config: NetworkConfig,
        action_spec: ActionSpec,
        n_entities: usize,
        personas: &[String],
        optimizer: AdamConfig,
        w_gp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if personas.is_empty() {
            return Err(Error::Config("need at least one discriminator".into()));
        }
        let net = Network::new(
            config,
            NetworkRole::Discriminator,
            action_spec,
            action_spec.feature_dim(),
            n_entities,
        )?;
        let members = personas
            .iter()
            .map(|p| {
                let params = net.init(rng);
                DiscriminatorMember {
                    persona: p.clone(),
                    adam: AdamState::new(&params),
                    params,
                }
            })
            .collect();
        Ok(Self {
            net,
            members,
            optimizer,
            w_gp,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn personas(&self) -> Vec<String> {
        self.members.iter().map(|m| m.persona.clone()).collect()
    }

    /// Raw scores `[member][row]`.
    pub fn scores(&self, batch: &EncoderBatch, exec: Execution) -> Result<Vec<Vec<f64>>> {
        parallel::map(exec, &self.members, |_, m| self.net.scalars(&m.params, batch))
            .into_iter()
            .collect()
    }

    /// One gradient step per member. Every member sees the same `policy`
    /// batch; `experts[i]` comes from member `i`'s own demonstrations.
    pub fn update(
        &mut self,
        experts: &[EncoderBatch],
        policy: &EncoderBatch,
        exec: Execution,
    ) -> Result<Vec<MemberStats>> {
        if experts.len() != self.members.len() {
            return Err(Error::Length {
                context: "expert batches vs discriminators".into(),
                left: self.members.len(),
                right: experts.len(),
            });
        }
        let (net, cfg, w_gp) = (&self.net, self.optimizer, self.w_gp);
        parallel::map_mut(exec, &mut self.members, |i, m| {
            let (mut stats, grads) = member_loss(net, &m.params, &experts[i], policy, w_gp)?;
            if !grads.is_finite() {
                return Err(Error::non_finite("discriminator gradient", m.persona.clone()));
            }
            adam_step(&mut m.params, &grads, &mut m.adam, &cfg, true)?;
            stats.persona = m.persona.clone();
            Ok(stats)
        })
        .into_iter()
        .collect()
    }
}

/// Instrumented check that a discriminator batch carries no auxiliary
/// input. `policy_view` is the policy's batch for the same rows (with α in
/// its extra block); `actions` are the actions taken.
pub fn audit_alpha_blindness(
    spec: &ActionSpec,
    disc: &EncoderBatch,
    policy_view: &EncoderBatch,
    actions: &[Action],
) -> Result<()> {
    let fail = |msg: String| Err(Error::Usage(format!("alpha-blindness audit: {msg}")));
    if disc.self_dim != BASE_SELF_DIM + spec.feature_dim() {
        return fail(format!("self width {} has room for more than (s, a)", disc.self_dim));
    }
    if disc.rows != policy_view.rows || disc.rows != actions.len() {
        return fail("row counts differ".into());
    }
    for r in 0..disc.rows {
        let d = &disc.self_feats[r * disc.self_dim..(r + 1) * disc.self_dim];
        let p = &policy_view.self_feats[r * policy_view.self_dim..(r + 1) * policy_view.self_dim];
        if d[..BASE_SELF_DIM] != p[..BASE_SELF_DIM] {
            return fail(format!("row {r}: observation features differ"));
        }
        if d[BASE_SELF_DIM..] != spec.action_features(&actions[r])[..] {
            return fail(format!("row {r}: extra block is not the action"));
        }
    }
    if disc.entities != policy_view.entities || disc.occupancy != policy_view.occupancy {
        return fail("entity or occupancy inputs differ".into());
    }
    Ok(())
}
