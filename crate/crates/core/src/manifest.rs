//! Run manifests. Every pipeline command records what it ran (config hash,
//! seed), what model it touched (fingerprints, chained so tuned and eval
//! artifacts trace back to their base weights), and what it measured. The
//! encoding is deliberately timestamp-free and key-sorted: rerunning a
//! command with the same config and seed must reproduce the manifest file
//! byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Which subcommand produced this manifest.
    pub command: String,
    /// SHA-256 of the exact configuration content the run used.
    pub config_hash: String,
    pub seed: u64,
    /// Fingerprint of the model this run produced or evaluated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_fingerprint: Option<String>,
    /// Fingerprint of the base model this run started from, when different.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_fingerprint: Option<String>,
    /// Metric name → value. BTreeMap keeps the encoding order-independent.
    pub metrics: BTreeMap<String, f64>,
    /// Artifact name → path written by the run.
    pub artifacts: BTreeMap<String, String>,
}

/// Hex SHA-256 of arbitrary config bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(command: &str, config: &[u8], seed: u64) -> Manifest {
        Manifest {
            command: command.to_string(),
            config_hash: config_hash(config),
            seed,
            model_fingerprint: None,
            base_fingerprint: None,
            metrics: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn with_model(mut self, fingerprint: &str) -> Manifest {
        self.model_fingerprint = Some(fingerprint.to_string());
        self
    }

    /// Chain provenance: record the base weights this run started from.
    pub fn with_base(mut self, fingerprint: &str) -> Manifest {
        self.base_fingerprint = Some(fingerprint.to_string());
        self
    }

    pub fn metric(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn artifact(&mut self, name: &str, path: &Path) -> &mut Self {
        self.artifacts.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("manifest encode: {}", e)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
    }
}
