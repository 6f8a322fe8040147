//! Experiment configuration: one TOML document drives a whole run.
//!
//! ```toml
//! schema_version = 1
//! env = "driving"
//! personas = ["careful", "reckless"]
//!
//! [demos]
//! dir = "demos"        # holds <persona>.jsonl, relative to this file
//!
//! [train]
//! iterations = 200
//!
//! [ppo]
//! learning_rate = 1e-3
//!
//! [network]
//! embedding_size = 16
//! ```
//!
//! Every table is optional except the top-level keys; unknown keys are
//! rejected with their name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{EnvConfig, EnvId, Layout};
use crate::error::{Error, Result};
use crate::experts::{DemonstrationSet, Persona};
use crate::nn::NetworkConfig;
use crate::ppo::PpoConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    /// Directory with one `<persona>.jsonl` per persona.
    pub dir: PathBuf,
    /// Samples per persona when recording.
    pub samples: usize,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("demos"),
            samples: 5000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub env: EnvId,
    /// Layout file; the reference layout for `env` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<PathBuf>,
    pub personas: Vec<String>,
    #[serde(default)]
    pub demos: DemoConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub network: NetworkConfig,
}

impl ExperimentConfig {
    pub fn new(env: EnvId, personas: &[Persona]) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            env,
            layout: None,
            personas: personas.iter().map(|p| p.to_string()).collect(),
            demos: DemoConfig::default(),
            train: TrainConfig::default(),
            ppo: PpoConfig::default(),
            network: NetworkConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.demos.dir.is_relative() {
            cfg.demos.dir = base.join(&cfg.demos.dir);
        }
        if let Some(l) = cfg.layout.as_mut() {
            if l.is_relative() {
                *l = base.join(&*l);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: unsupported value {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.persona_list()?;
        if self.demos.samples == 0 {
            return Err(Error::Config("demos.samples must be positive".into()));
        }
        self.train.validate()?;
        self.ppo.validate()?;
        self.network.validate()
    }

    pub fn persona_list(&self) -> Result<Vec<Persona>> {
        if self.personas.is_empty() {
            return Err(Error::Config("personas: at least one persona is required".into()));
        }
        let mut out: Vec<Persona> = Vec::new();
        for name in &self.personas {
            let p = Persona::parse_for(name, self.env)?;
            if out.contains(&p) {
                return Err(Error::Config(format!("personas: `{name}` listed twice")));
            }
            out.push(p);
        }
        Ok(out)
    }

    /// The single-persona baseline for `persona`: one discriminator and
    /// the auxiliary input fixed at 1, everything else unchanged.
    pub fn single_persona(&self, persona: &str) -> Result<Self> {
        let p = Persona::parse_for(persona, self.env)?;
        if !self.persona_list()?.contains(&p) {
            return Err(Error::Config(format!(
                "personas: `{persona}` is not part of this experiment"
            )));
        }
        let mut out = self.clone();
        out.personas = vec![p.to_string()];
        out.train.alpha_set = vec![1.0];
        Ok(out)
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        let layout = match &self.layout {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("layout: cannot read {}: {e}", p.display())))?;
                Layout::parse(&text)?
            }
            None => Layout::reference(self.env),
        };
        if layout.kind != self.env {
            return Err(Error::Config(format!(
                "layout: `{}` is a {} layout but env is {}",
                layout.name, layout.kind, self.env
            )));
        }
        Ok(EnvConfig::new(layout))
    }

    pub fn demo_path(&self, persona: &str) -> PathBuf {
        demo_path(&self.demos.dir, persona)
    }

    /// Loads one demonstration file per persona, in config order.
    pub fn load_demos(&self) -> Result<Vec<DemonstrationSet>> {
        let mut out = Vec::new();
        for p in self.persona_list()? {
            let path = self.demo_path(p.as_str());
            if !path.exists() {
                return Err(Error::Config(format!(
                    "demos: missing {} (record it with gen-demos)",
                    path.display()
                )));
            }
            let d = DemonstrationSet::load(&path)?;
            if d.persona != p.as_str() || d.env != self.env {
                return Err(Error::Config(format!(
                    "demos: {} holds `{}` for {}, expected `{p}` for {}",
                    path.display(),
                    d.persona,
                    d.env,
                    self.env
                )));
            }
            out.push(d);
        }
        Ok(out)
    }
}

pub fn demo_path(dir: &Path, persona: &str) -> PathBuf {
    dir.join(format!("{persona}.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema_version = 1\nenv = \"navigation\"\npersonas = [\"jump\", \"strafe\"]\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.persona_list().unwrap(), vec![Persona::Jump, Persona::Strafe]);
    }

    #[test]
    fn single_persona_baseline() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        let b = c.single_persona("strafe").unwrap();
        assert_eq!(b.personas, ["strafe"]);
        assert_eq!(b.train.alpha_set, [1.0]);
        assert_eq!((b.ppo, b.network), (c.ppo.clone(), c.network.clone()));
        assert!(c.single_persona("zigzag").is_err());
        assert!(c.single_persona("careful").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.train.disc_batch_size = Some(64);
        c.network.conv_filters = vec![4, 8];
        let back = ExperimentConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn violations_name_the_field() {
        let cases = [
            (format!("{MINIMAL}[train]\nitertions = 3\n"), "itertions"),
            (format!("{MINIMAL}[ppo]\ngamma = 1.5\n"), "gamma"),
            (format!("{MINIMAL}[train]\nalpha_set = [2.0]\n"), "alpha_set"),
            (
                MINIMAL.replace("schema_version = 1", "schema_version = 7"),
                "schema_version",
            ),
            (MINIMAL.replace("strafe", "careful"), "careful"),
            (MINIMAL.replace("\"strafe\"", "\"jump\""), "personas"),
            (
                "env = \"navigation\"\npersonas = [\"jump\"]\n".to_string(),
                "schema_version",
            ),
        ];
        for (text, field) in cases {
            let e = ExperimentConfig::parse(&text).unwrap_err().to_string();
            assert!(e.contains(field), "{field}: {e}");
        }
    }

    #[test]
    fn unknown_persona_lists_the_valid_ones() {
        let e = ExperimentConfig::parse(&MINIMAL.replace("strafe", "sneaky")).unwrap_err();
        assert!(
            matches!(e, Error::UnknownPersona { ref valid, .. } if valid == "jump, zigzag, strafe"),
            "{e}"
        );
    }
}
