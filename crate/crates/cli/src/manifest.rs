//! Run manifests: what a command consumed and produced, with content
//! hashes. A manifest is written once, after every artifact exists.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory for outputs; as given for inputs.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path, shown_as: PathBuf) -> Result<Self, Failure> {
        let data = std::fs::read(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        Ok(Self {
            path: shown_as,
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    /// Hash of the command, its configuration and its inputs.
    pub run_id: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn sha256_hex(data: &[u8]) -> String {
    format!("{:x}", Sha256::digest(data))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn run_id(command: &str, config: &serde_json::Value, seeds: &[u64], inputs: &[Artifact]) -> String {
    let key = serde_json::json!({
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": inputs.iter().map(|a| &a.sha256).collect::<Vec<_>>(),
    });
    sha256_hex(key.to_string().as_bytes())[..16].to_string()
}

/// What to do with an output directory before running.
#[derive(Debug, PartialEq)]
pub enum Prior {
    /// No manifest yet (or outputs damaged): run.
    Fresh,
    /// Same run already complete with intact artifacts: nothing to do.
    UpToDate(RunManifest),
}

/// Checks `dir/name` against the run about to happen. A manifest from a
/// different run is never overwritten.
pub fn check_prior(dir: &Path, name: &str, run_id: &str) -> Result<Prior, Failure> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(Prior::Fresh);
    }
    let m: RunManifest = serde_json::from_slice(
        &std::fs::read(&path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?,
    )
    .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    if m.run_id != run_id {
        return Err(Failure::usage(format!(
            "{} already holds run {} ({}); pick another --out",
            dir.display(),
            m.run_id,
            m.command
        )));
    }
    for a in &m.artifacts {
        match Artifact::of(&dir.join(&a.path), a.path.clone()) {
            Ok(now) if now.sha256 == a.sha256 => {}
            _ => return Ok(Prior::Fresh),
        }
    }
    Ok(Prior::UpToDate(m))
}

pub fn write(dir: &Path, name: &str, m: &RunManifest) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Failure::runtime(e.to_string()))?;
    std::fs::write(dir.join(name), text + "\n").map_err(|e| Failure::runtime(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn run_id_depends_on_every_part() {
        let c = serde_json::json!({"a": 1});
        let i = vec![Artifact {
            path: "x".into(),
            sha256: "00".into(),
            bytes: 1,
        }];
        let base = run_id("train", &c, &[1], &i);
        assert_eq!(base, run_id("train", &c, &[1], &i));
        assert_ne!(base, run_id("eval", &c, &[1], &i));
        assert_ne!(base, run_id("train", &serde_json::json!({"a": 2}), &[1], &i));
        assert_ne!(base, run_id("train", &c, &[2], &i));
        assert_ne!(base, run_id("train", &c, &[1], &[]));
    }
}
