//! The shared encoder and the policy, value and discriminator heads.
//!
//! Full mode: self features go through a linear+ReLU layer; each entity
//! through a shared linear+ReLU layer; the `[self, entity]` tokens pass a
//! single transformer encoder layer and are average pooled. In parallel the
//! occupancy map is embedded (tanh) and fed to a strided 3D conv stack with
//! leaky ReLU. Both vectors are concatenated into the fused embedding of
//! width `3d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tape::{ConvGeometry, GradientTape, Var};
use super::tensor::Tensor;
use crate::envs::{
    Action, ActionSpec, Observation, BASE_SELF_DIM, ENTITY_DIM, OCCUPANCY_CATEGORIES, OCCUPANCY_SIDE, OCCUPANCY_VOXELS,
};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
const CONV_KERNEL: usize = 3;
const CONV_PADDING: usize = 1;
const POLICY_OUT_SCALE: f64 = 0.01;
pub const INITIAL_LOG_STD: f64 = -std::f64::consts::LN_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchitectureMode {
    Full,
    FlatMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub embedding_size: usize,
    pub attention_heads: usize,
    pub conv_filters: Vec<usize>,
    pub conv_stride: usize,
    pub voxel_embedding_size: usize,
    pub head_hidden: usize,
    pub architecture_mode: ArchitectureMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            embedding_size: 128,
            attention_heads: 4,
            conv_filters: vec![32, 64, 128],
            conv_stride: 2,
            voxel_embedding_size: 8,
            head_hidden: 256,
            architecture_mode: ArchitectureMode::Full,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_size == 0 {
            return Err(Error::Config("network.embedding_size must be > 0".into()));
        }
        if self.attention_heads == 0 || (2 * self.embedding_size) % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "network.attention_heads ({}) must divide 2 * embedding_size ({})",
                self.attention_heads,
                2 * self.embedding_size
            )));
        }
        if self.architecture_mode == ArchitectureMode::Full {
            if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
                return Err(Error::Config(
                    "network.conv_filters must be non-empty and positive in full mode".into(),
                ));
            }
            if self.conv_stride == 0 || self.voxel_embedding_size == 0 {
                return Err(Error::Config(
                    "network.conv_stride and network.voxel_embedding_size must be > 0".into(),
                ));
            }
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("network.head_hidden must be > 0".into()));
        }
        Ok(())
    }

    /// Width of the fused embedding.
    pub fn embedding_width(&self) -> usize {
        3 * self.embedding_size
    }

    fn conv_geometries(&self) -> Vec<ConvGeometry> {
        let mut size = OCCUPANCY_SIDE;
        let mut cin = self.voxel_embedding_size;
        self.conv_filters
            .iter()
            .map(|&cout| {
                let g = ConvGeometry {
                    in_size: size,
                    in_channels: cin,
                    out_channels: cout,
                    kernel: CONV_KERNEL,
                    stride: self.conv_stride,
                    padding: CONV_PADDING,
                };
                size = g.out_size();
                cin = cout;
                g
            })
            .collect()
    }

    fn conv_output_len(&self) -> usize {
        self.conv_geometries()
            .last()
            .map(|g| g.out_voxels() * g.out_channels)
            .unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkRole {
    Policy,
    Value,
    Discriminator,
}

/// A network definition: architecture plus input/output contract.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub role: NetworkRole,
    pub action_spec: ActionSpec,
    /// Width of the block appended to the base self features: the auxiliary
    /// input for policy/value, the action features for discriminators.
    pub extra_dim: usize,
    pub n_entities: usize,
}

/// Row-major inputs for a batch of observations.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBatch {
    pub rows: usize,
    pub self_dim: usize,
    pub self_feats: Vec<f64>,
    pub n_entities: usize,
    pub entities: Vec<f64>,
    pub occupancy: Vec<usize>,
}

impl EncoderBatch {
    pub fn new(self_dim: usize, n_entities: usize) -> Self {
        Self {
            rows: 0,
            self_dim,
            self_feats: Vec::new(),
            n_entities,
            entities: Vec::new(),
            occupancy: Vec::new(),
        }
    }

    pub fn with_capacity(self_dim: usize, n_entities: usize, rows: usize) -> Self {
        Self {
            rows: 0,
            self_dim,
            self_feats: Vec::with_capacity(rows * self_dim),
            n_entities,
            entities: Vec::with_capacity(rows * n_entities * ENTITY_DIM),
            occupancy: Vec::with_capacity(rows * OCCUPANCY_VOXELS),
        }
    }

    /// Appends one observation with its extra feature block.
    pub fn push(&mut self, obs: &Observation, extra: &[f64]) -> Result<()> {
        if BASE_SELF_DIM + extra.len() != self.self_dim {
            return Err(Error::shape(
                "encoder self features",
                &[self.self_dim],
                &[BASE_SELF_DIM + extra.len()],
            ));
        }
        if obs.entities.len() != self.n_entities {
            return Err(Error::shape(
                "encoder entity list",
                &[self.n_entities],
                &[obs.entities.len()],
            ));
        }
        if obs.occupancy.len() != OCCUPANCY_VOXELS {
            return Err(Error::shape(
                "encoder occupancy",
                &[OCCUPANCY_VOXELS],
                &[obs.occupancy.len()],
            ));
        }
        self.self_feats.extend_from_slice(&obs.base_features());
        self.self_feats.extend_from_slice(extra);
        for e in &obs.entities {
            self.entities.extend_from_slice(e);
        }
        self.occupancy.extend(obs.occupancy.iter().map(|&c| c as usize));
        self.rows += 1;
        Ok(())
    }

    pub fn single(obs: &Observation, extra: &[f64]) -> Result<Self> {
        let mut b = Self::new(BASE_SELF_DIM + extra.len(), obs.entities.len());
        b.push(obs, extra)?;
        Ok(b)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &EncoderBatch) -> Result<Self> {
        if self.self_dim != other.self_dim || self.n_entities != other.n_entities {
            return Err(Error::shape(
                "encoder batch concat",
                &[self.self_dim, self.n_entities],
                &[other.self_dim, other.n_entities],
            ));
        }
        let mut out = self.clone();
        out.rows += other.rows;
        out.self_feats.extend_from_slice(&other.self_feats);
        out.entities.extend_from_slice(&other.entities);
        out.occupancy.extend_from_slice(&other.occupancy);
        Ok(out)
    }

    /// Hex SHA-256 over dimensions and every feature bit pattern.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for n in [self.rows, self.self_dim, self.n_entities] {
            h.update((n as u64).to_le_bytes());
        }
        for v in self.self_feats.iter().chain(&self.entities) {
            h.update(v.to_bits().to_le_bytes());
        }
        for &c in &self.occupancy {
            h.update([c as u8]);
        }
        format!("{:x}", h.finalize())
    }

    /// Subset of rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut out = Self::with_capacity(self.self_dim, self.n_entities, rows.len());
        let ew = self.n_entities * ENTITY_DIM;
        for &r in rows {
            out.self_feats
                .extend_from_slice(&self.self_feats[r * self.self_dim..(r + 1) * self.self_dim]);
            out.entities.extend_from_slice(&self.entities[r * ew..(r + 1) * ew]);
            out.occupancy
                .extend_from_slice(&self.occupancy[r * OCCUPANCY_VOXELS..(r + 1) * OCCUPANCY_VOXELS]);
        }
        out.rows = rows.len();
        out
    }
}

/// Recorded outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    /// Fused embedding `[rows, 3d]`.
    pub embedding: Var,
    /// Head output `[rows, out]`.
    pub output: Var,
    /// Hidden pre-activations of a discriminator head.
    pub disc_pre: Option<(Var, Var)>,
}

/// One member of a policy's output: a distribution over actions.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionDistribution {
    Categorical {
        probs: Vec<f64>,
    },
    /// `a = tanh(u)`, `u ~ N(pre_mean, std²)` independently per dimension.
    SquashedGaussian {
        pre_mean: Vec<f64>,
        std: Vec<f64>,
    },
}

/// An action drawn from a policy together with what PPO needs to score it.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledAction {
    pub action: Action,
    /// Pre-squash sample for continuous actions; empty for discrete ones.
    pub raw: Vec<f64>,
    pub log_prob: f64,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln(1 - tanh(u)²)` without cancellation.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl ActionDistribution {
    /// Action-space mean: `tanh(pre_mean)` for continuous, the probability
    /// vector for discrete.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            ActionDistribution::Categorical { probs } => probs.clone(),
            ActionDistribution::SquashedGaussian { pre_mean, .. } => pre_mean.iter().map(|m| m.tanh()).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SampledAction {
        match self {
            ActionDistribution::Categorical { probs } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut choice = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        choice = i;
                        break;
                    }
                }
                SampledAction {
                    action: Action::Discrete(choice),
                    raw: Vec::new(),
                    log_prob: probs[choice].max(f64::MIN_POSITIVE).ln(),
                }
            }
            ActionDistribution::SquashedGaussian { pre_mean, std } => {
                let raw: Vec<f64> = pre_mean
                    .iter()
                    .zip(std)
                    .map(|(m, s)| m + s * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let log_prob = self.log_prob_raw(&raw);
                SampledAction {
                    action: Action::Continuous(raw.iter().map(|u| u.tanh()).collect()),
                    raw,
                    log_prob,
                }
            }
        }
    }

    /// Most likely action: argmax for discrete, `tanh(pre_mean)` otherwise.
    pub fn mode(&self) -> SampledAction {
        match self {
            ActionDistribution::Categorical { probs } => {
                let (best, p) =
                    probs.iter().enumerate().fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc },
                    );
                SampledAction {
                    action: Action::Discrete(best),
                    raw: Vec::new(),
                    log_prob: p.ln(),
                }
            }
            ActionDistribution::SquashedGaussian { pre_mean, .. } => SampledAction {
                action: Action::Continuous(pre_mean.iter().map(|m| m.tanh()).collect()),
                raw: pre_mean.clone(),
                log_prob: self.log_prob_raw(pre_mean),
            },
        }
    }

    /// Log-density of a pre-squash sample, including the tanh Jacobian.
    pub fn log_prob_raw(&self, raw: &[f64]) -> f64 {
        match self {
            ActionDistribution::Categorical { .. } => f64::NAN,
            ActionDistribution::SquashedGaussian { pre_mean, std } => pre_mean
                .iter()
                .zip(std)
                .zip(raw)
                .map(|((m, s), u)| {
                    let z = (u - m) / s;
                    -0.5 * z * z - s.ln() - HALF_LN_2PI - log_one_minus_tanh_sq(*u)
                })
                .sum(),
        }
    }

    /// Log-probability (discrete) or log-density (continuous, action space).
    pub fn log_prob(&self, action: &Action) -> f64 {
        match (self, action) {
            (ActionDistribution::Categorical { probs }, Action::Discrete(a)) => probs[*a].ln(),
            (ActionDistribution::SquashedGaussian { .. }, Action::Continuous(v)) => {
                let raw: Vec<f64> = v.iter().map(|a| a.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh()).collect();
                self.log_prob_raw(&raw)
            }
            _ => f64::NAN,
        }
    }

    /// Entropy; for continuous actions that of the pre-squash Gaussian.
    pub fn entropy(&self) -> f64 {
        match self {
            ActionDistribution::Categorical { probs } => probs.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum(),
            ActionDistribution::SquashedGaussian { std, .. } => std.iter().map(|s| s.ln() + 0.5 + HALF_LN_2PI).sum(),
        }
    }
}

fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl Network {
    pub fn new(
        config: NetworkConfig,
        role: NetworkRole,
        action_spec: ActionSpec,
        extra_dim: usize,
        n_entities: usize,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            role,
            action_spec,
            extra_dim,
            n_entities,
        })
    }

    pub fn self_dim(&self) -> usize {
        BASE_SELF_DIM + self.extra_dim
    }

    pub fn output_dim(&self) -> usize {
        match self.role {
            NetworkRole::Policy => self.action_spec.output_dim(),
            NetworkRole::Value | NetworkRole::Discriminator => 1,
        }
    }

    pub fn empty_batch(&self) -> EncoderBatch {
        EncoderBatch::new(self.self_dim(), self.n_entities)
    }

    /// Names and shapes of every trainable tensor, in store order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let cfg = &self.config;
        let d = cfg.embedding_size;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let lin = |out: &mut Vec<(String, Vec<usize>)>, name: &str, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o]));
            out.push((format!("{name}.b"), vec![o]));
        };
        match cfg.architecture_mode {
            ArchitectureMode::Full => {
                lin(&mut out, "self", self.self_dim(), d);
                lin(&mut out, "entity", ENTITY_DIM, d);
                for p in ["q", "k", "v", "o"] {
                    lin(&mut out, &format!("attn.{p}"), 2 * d, 2 * d);
                }
                out.push(("attn.ln1.g".into(), vec![2 * d]));
                out.push(("attn.ln1.b".into(), vec![2 * d]));
                lin(&mut out, "attn.ff1", 2 * d, 2 * d);
                lin(&mut out, "attn.ff2", 2 * d, 2 * d);
                out.push(("attn.ln2.g".into(), vec![2 * d]));
                out.push(("attn.ln2.b".into(), vec![2 * d]));
                out.push((
                    "voxel.embed".into(),
                    vec![OCCUPANCY_CATEGORIES, cfg.voxel_embedding_size],
                ));
                for (i, g) in cfg.conv_geometries().iter().enumerate() {
                    lin(&mut out, &format!("conv{i}"), g.patch_len(), g.out_channels);
                }
                if cfg.conv_output_len() != d {
                    lin(&mut out, "conv.proj", cfg.conv_output_len(), d);
                }
            }
            ArchitectureMode::FlatMlp => {
                let input = self.self_dim() + self.n_entities * ENTITY_DIM + OCCUPANCY_VOXELS;
                lin(&mut out, "flat", input, cfg.embedding_width());
            }
        }
        let h = cfg.head_hidden;
        lin(&mut out, "head.h0", cfg.embedding_width(), h);
        if self.role == NetworkRole::Discriminator {
            lin(&mut out, "head.h1", h, h);
        }
        lin(&mut out, "head.out", h, self.output_dim());
        if self.role == NetworkRole::Policy {
            if let ActionSpec::Continuous { dims } = self.action_spec {
                out.push(("head.log_std".into(), vec![dims]));
            }
        }
        out
    }

    /// Fan-in scaled uniform initialization, rounded onto the `f32` grid.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterStore {
        let mut store = ParameterStore::new();
        for (name, shape) in self.parameter_layout() {
            let t = if name.ends_with(".g") {
                Tensor::filled(&shape, 1.0)
            } else if name == "head.log_std" {
                Tensor::filled(&shape, INITIAL_LOG_STD)
            } else if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else if name == "voxel.embed" {
                uniform_tensor(rng, &shape, 1.0)
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                let mut t = uniform_tensor(rng, &shape, bound);
                if name == "head.out.w" && self.role == NetworkRole::Policy {
                    t.data_mut().iter_mut().for_each(|v| *v *= POLICY_OUT_SCALE);
                }
                t
            };
            store.insert(name, t).expect("layout names are unique");
        }
        store.quantize_f32();
        store
    }

    /// Zero-valued parameters with this network's layout.
    pub fn zeros(&self) -> ParameterStore {
        let mut store = ParameterStore::new();
        for (name, shape) in self.parameter_layout() {
            store
                .insert(name, Tensor::zeros(&shape))
                .expect("layout names are unique");
        }
        store
    }

    pub fn check_store(&self, store: &ParameterStore) -> Result<()> {
        for (name, shape) in self.parameter_layout() {
            let t = store.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("parameter `{name}`"), &shape, t.shape()));
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &EncoderBatch) -> Result<()> {
        if batch.self_dim != self.self_dim() {
            return Err(Error::shape(
                "network self features",
                &[self.self_dim()],
                &[batch.self_dim],
            ));
        }
        if self.config.architecture_mode == ArchitectureMode::FlatMlp && batch.n_entities != self.n_entities {
            return Err(Error::shape(
                "network entity list",
                &[self.n_entities],
                &[batch.n_entities],
            ));
        }
        if batch.rows == 0 {
            return Err(Error::Usage("empty encoder batch".into()));
        }
        Ok(())
    }

    fn linear_layer(&self, tape: &mut GradientTape, x: Var, name: &str) -> Result<Var> {
        let w = tape.param(&format!("{name}.w"))?;
        let b = tape.param(&format!("{name}.b"))?;
        tape.linear(x, w, b)
    }

    /// Records the encoder and returns the fused embedding `[rows, 3d]`.
    pub fn encode(&self, tape: &mut GradientTape, batch: &EncoderBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let rows = batch.rows;
        let cfg = &self.config;
        let d = cfg.embedding_size;
        let self_in = tape.constant(Tensor::matrix(rows, batch.self_dim, batch.self_feats.clone())?)?;
        if cfg.architecture_mode == ArchitectureMode::FlatMlp {
            let ew = batch.n_entities * ENTITY_DIM;
            let mut flat = Vec::with_capacity(rows * (batch.self_dim + ew + OCCUPANCY_VOXELS));
            for r in 0..rows {
                flat.extend_from_slice(&batch.self_feats[r * batch.self_dim..(r + 1) * batch.self_dim]);
                flat.extend_from_slice(&batch.entities[r * ew..(r + 1) * ew]);
                flat.extend(
                    batch.occupancy[r * OCCUPANCY_VOXELS..(r + 1) * OCCUPANCY_VOXELS]
                        .iter()
                        .map(|&c| c as f64 / (OCCUPANCY_CATEGORIES - 1) as f64),
                );
            }
            let width = batch.self_dim + ew + OCCUPANCY_VOXELS;
            let x = tape.constant(Tensor::matrix(rows, width, flat)?)?;
            let h = self.linear_layer(tape, x, "flat")?;
            return tape.relu(h);
        }

        // entity tokens
        let self_emb = self.linear_layer(tape, self_in, "self")?;
        let self_emb = tape.relu(self_emb)?;
        let (tokens, group) = if batch.n_entities == 0 {
            let zeros = tape.constant(Tensor::zeros(&[rows, d]))?;
            (tape.concat_cols(&[self_emb, zeros])?, 1)
        } else {
            let n = batch.n_entities;
            let ent = tape.constant(Tensor::matrix(rows * n, ENTITY_DIM, batch.entities.clone())?)?;
            let ent = self.linear_layer(tape, ent, "entity")?;
            let ent = tape.relu(ent)?;
            let rep = tape.repeat_rows(self_emb, n)?;
            (tape.concat_cols(&[rep, ent])?, n)
        };
        let q = self.linear_layer(tape, tokens, "attn.q")?;
        let k = self.linear_layer(tape, tokens, "attn.k")?;
        let v = self.linear_layer(tape, tokens, "attn.v")?;
        let att = tape.attention(q, k, v, group, cfg.attention_heads)?;
        let att = self.linear_layer(tape, att, "attn.o")?;
        let res = tape.add(tokens, att)?;
        let (g1, b1) = (tape.param("attn.ln1.g")?, tape.param("attn.ln1.b")?);
        let h1 = tape.layer_norm(res, g1, b1)?;
        let ff = self.linear_layer(tape, h1, "attn.ff1")?;
        let ff = tape.relu(ff)?;
        let ff = self.linear_layer(tape, ff, "attn.ff2")?;
        let res = tape.add(h1, ff)?;
        let (g2, b2) = (tape.param("attn.ln2.g")?, tape.param("attn.ln2.b")?);
        let h2 = tape.layer_norm(res, g2, b2)?;
        let x_t = tape.mean_groups(h2, group)?;

        // occupancy map
        // tanh commutes with the lookup; squashing the table is cheaper
        let table = tape.param("voxel.embed")?;
        let table = tape.tanh(table)?;
        let emb = tape.embedding(table, batch.occupancy.clone())?;
        let mut x = tape.reshape(emb, vec![rows, OCCUPANCY_VOXELS * cfg.voxel_embedding_size])?;
        for (i, geom) in cfg.conv_geometries().into_iter().enumerate() {
            let w = tape.param(&format!("conv{i}.w"))?;
            let b = tape.param(&format!("conv{i}.b"))?;
            let c = tape.conv3d(x, w, b, geom)?;
            x = tape.leaky_relu(c, LEAKY_SLOPE)?;
        }
        if cfg.conv_output_len() != d {
            let p = self.linear_layer(tape, x, "conv.proj")?;
            x = tape.leaky_relu(p, LEAKY_SLOPE)?;
        }
        tape.concat_cols(&[x_t, x])
    }

    /// Records the head on top of an embedding.
    pub fn head(&self, tape: &mut GradientTape, embedding: Var) -> Result<ForwardPass> {
        match self.role {
            NetworkRole::Policy | NetworkRole::Value => {
                let h = self.linear_layer(tape, embedding, "head.h0")?;
                let h = tape.relu(h)?;
                let output = self.linear_layer(tape, h, "head.out")?;
                Ok(ForwardPass {
                    embedding,
                    output,
                    disc_pre: None,
                })
            }
            NetworkRole::Discriminator => {
                let z1 = self.linear_layer(tape, embedding, "head.h0")?;
                let h1 = tape.leaky_relu(z1, LEAKY_SLOPE)?;
                let z2 = self.linear_layer(tape, h1, "head.h1")?;
                let h2 = tape.leaky_relu(z2, LEAKY_SLOPE)?;
                let output = self.linear_layer(tape, h2, "head.out")?;
                Ok(ForwardPass {
                    embedding,
                    output,
                    disc_pre: Some((z1, z2)),
                })
            }
        }
    }

    pub fn forward(&self, tape: &mut GradientTape, batch: &EncoderBatch) -> Result<ForwardPass> {
        let emb = self.encode(tape, batch)?;
        self.head(tape, emb)
    }

    /// Fused embedding values without keeping the tape.
    pub fn embed(&self, store: &ParameterStore, batch: &EncoderBatch) -> Result<Tensor> {
        let mut tape = GradientTape::new(store);
        let e = self.encode(&mut tape, batch)?;
        Ok(tape.value(e).clone())
    }

    /// Raw head outputs `[rows, out]`, checked for finiteness.
    pub fn outputs(&self, store: &ParameterStore, batch: &EncoderBatch) -> Result<Tensor> {
        let mut tape = GradientTape::new(store);
        let fp = self.forward(&mut tape, batch)?;
        let out = tape.value(fp.output).clone();
        out.ensure_finite("network output")?;
        Ok(out)
    }

    /// Policy distributions for every row.
    pub fn distributions(&self, store: &ParameterStore, batch: &EncoderBatch) -> Result<Vec<ActionDistribution>> {
        let out = self.outputs(store, batch)?;
        self.distributions_from_output(store, &out)
    }

    pub fn distributions_from_output(&self, store: &ParameterStore, out: &Tensor) -> Result<Vec<ActionDistribution>> {
        if self.role != NetworkRole::Policy {
            return Err(Error::Usage("action distributions need a policy network".into()));
        }
        out.ensure_finite("policy logits")?;
        let width = out.cols();
        match self.action_spec {
            ActionSpec::Discrete { .. } => Ok((0..out.rows())
                .map(|r| ActionDistribution::Categorical {
                    probs: softmax(&out.data()[r * width..(r + 1) * width]),
                })
                .collect()),
            ActionSpec::Continuous { .. } => {
                let log_std = store.get("head.log_std")?;
                log_std.ensure_finite("policy log-std")?;
                let std: Vec<f64> = log_std.data().iter().map(|l| l.exp()).collect();
                Ok((0..out.rows())
                    .map(|r| ActionDistribution::SquashedGaussian {
                        pre_mean: out.data()[r * width..(r + 1) * width].to_vec(),
                        std: std.clone(),
                    })
                    .collect())
            }
        }
    }

    /// Scalar head outputs (value or discriminator score) per row.
    pub fn scalars(&self, store: &ParameterStore, batch: &EncoderBatch) -> Result<Vec<f64>> {
        Ok(self.outputs(store, batch)?.into_data())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}
