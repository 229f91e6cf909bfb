use std::path::Path;

use scenegen::denoiser::CHECKPOINT_VERSION;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub scenegen: String,
    pub checkpoint_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            scenegen: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: CHECKPOINT_VERSION,
        }
    }
}

/// An input file and its content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl InputRef {
    pub fn new(role: &str, path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(CliError::io(path))?;
        Ok(Self {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        })
    }
}

/// Written next to every command's outputs; together with the inputs it
/// names, enough to reproduce those outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub inputs: Vec<InputRef>,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, inputs: Vec<InputRef>, outputs: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            versions: Versions::default(),
            inputs,
            outputs,
            config: RunConfig {
                workers: 0,
                ..config.clone()
            },
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(CliError::io(&path))
    }
}
