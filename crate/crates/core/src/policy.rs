//! A trained model as loaded from a checkpoint: the α-conditioned policy,
//! its value network and the discriminators, plus the metadata needed to
//! rebuild them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminators::{DiscriminatorMember, DiscriminatorSet};
use crate::envs::{ActionSpec, EnvConfig, EnvId, Observation};
use crate::error::{Error, Result};
use crate::nn::{
    ActionDistribution, AdamConfig, AdamState, Checkpoint, EncoderBatch, Network, NetworkConfig, NetworkRole,
    ParameterStore, SampledAction,
};

pub const MODEL_FORMAT: &str = "multigail-model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format: String,
    pub env: EnvId,
    pub layout: String,
    pub personas: Vec<String>,
    pub network: NetworkConfig,
    pub action_spec: ActionSpec,
    pub n_entities: usize,
    pub iteration: usize,
    #[serde(default)]
    pub w_gp: f64,
}

impl ModelMeta {
    pub fn n_personas(&self) -> usize {
        self.personas.len()
    }
}

/// Immutable policy parameters conditioned on an auxiliary input.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub net: Network,
    pub params: ParameterStore,
}

impl PolicyModel {
    pub fn n_alpha(&self) -> usize {
        self.net.extra_dim
    }

    fn check_alpha(&self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.n_alpha() {
            return Err(Error::Length {
                context: "policy alpha".into(),
                left: self.n_alpha(),
                right: alpha.len(),
            });
        }
        Ok(())
    }

    pub fn distribution(&self, obs: &Observation, alpha: &[f64]) -> Result<ActionDistribution> {
        self.check_alpha(alpha)?;
        let batch = EncoderBatch::single(obs, alpha)?;
        Ok(self.net.distributions(&self.params, &batch)?.remove(0))
    }

    /// Samples an action, or takes the mode when `deterministic`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        alpha: &[f64],
        deterministic: bool,
        rng: &mut R,
    ) -> Result<SampledAction> {
        let d = self.distribution(obs, alpha)?;
        Ok(if deterministic { d.mode() } else { d.sample(rng) })
    }
}

/// Everything stored in a training checkpoint.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub meta: ModelMeta,
    pub policy: PolicyModel,
    pub value: Option<(Network, ParameterStore)>,
    pub discriminators: Option<DiscriminatorSet>,
}

pub fn disc_store_name(persona: &str) -> String {
    format!("disc.{persona}")
}

impl TrainedModel {
    pub fn policy_network(meta: &ModelMeta) -> Result<Network> {
        Network::new(
            meta.network.clone(),
            NetworkRole::Policy,
            meta.action_spec,
            meta.n_personas(),
            meta.n_entities,
        )
    }

    pub fn value_network(meta: &ModelMeta) -> Result<Network> {
        Network::new(
            meta.network.clone(),
            NetworkRole::Value,
            meta.action_spec,
            meta.n_personas(),
            meta.n_entities,
        )
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck =
            Checkpoint::new(serde_json::to_value(&self.meta)?).with_store("policy", self.policy.params.clone());
        if let Some((_, v)) = &self.value {
            ck = ck.with_store("value", v.clone());
        }
        if let Some(d) = &self.discriminators {
            for m in &d.members {
                ck = ck.with_store(disc_store_name(&m.persona), m.params.clone());
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ck.metadata.clone())
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.format != MODEL_FORMAT {
            return Err(Error::Format(format!(
                "checkpoint format `{}` is not {MODEL_FORMAT}",
                meta.format
            )));
        }
        if meta.personas.is_empty() {
            return Err(Error::Format("checkpoint lists no personas".into()));
        }
        let pnet = Self::policy_network(&meta)?;
        let params = ck.store("policy")?.clone();
        pnet.check_store(&params)?;
        let value = match ck.stores.get("value") {
            Some(v) => {
                let vnet = Self::value_network(&meta)?;
                vnet.check_store(v)?;
                Some((vnet, v.clone()))
            }
            None => None,
        };
        let has_discs = meta
            .personas
            .iter()
            .all(|p| ck.stores.contains_key(&disc_store_name(p)));
        let discriminators = if has_discs {
            let net = Network::new(
                meta.network.clone(),
                NetworkRole::Discriminator,
                meta.action_spec,
                meta.action_spec.feature_dim(),
                meta.n_entities,
            )?;
            let mut members = Vec::new();
            for p in &meta.personas {
                let params = ck.store(&disc_store_name(p))?.clone();
                net.check_store(&params)?;
                members.push(DiscriminatorMember {
                    persona: p.clone(),
                    adam: AdamState::new(&params),
                    params,
                });
            }
            Some(DiscriminatorSet {
                net,
                members,
                optimizer: AdamConfig::default(),
                w_gp: meta.w_gp,
            })
        } else {
            None
        };
        Ok(Self {
            policy: PolicyModel { net: pnet, params },
            value,
            discriminators,
            meta,
        })
    }

    /// Freshly initialized networks, as at iteration 0 of training.
    pub fn untrained(env: &EnvConfig, personas: &[String], network: NetworkConfig, seed: u64) -> Result<Self> {
        network.validate()?;
        let meta = ModelMeta {
            format: MODEL_FORMAT.into(),
            env: env.id(),
            layout: env.layout.name.clone(),
            personas: personas.to_vec(),
            network,
            action_spec: env.action_spec(),
            n_entities: env.n_entities(),
            iteration: 0,
            w_gp: 10.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pnet = Self::policy_network(&meta)?;
        let vnet = Self::value_network(&meta)?;
        let params = pnet.init(&mut rng);
        let vparams = vnet.init(&mut rng);
        let discs = DiscriminatorSet::new(
            meta.network.clone(),
            meta.action_spec,
            meta.n_entities,
            personas,
            AdamConfig::default(),
            meta.w_gp,
            &mut rng,
        )?;
        Ok(Self {
            policy: PolicyModel { net: pnet, params },
            value: Some((vnet, vparams)),
            discriminators: Some(discs),
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
