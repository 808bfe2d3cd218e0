//! Run configuration: one JSON document with model, train, data, degrade,
//! and sample sections. Unknown keys are rejected; every run prints the
//! hash of the fully resolved document so artifacts are attributable.

use std::path::Path;

use ditfuse_core::m3::{DataConfig, DegradeConfig};
use ditfuse_core::model::ModelConfig;
use ditfuse_core::train::TrainConfig;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 32,
            guidance: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub degrade: DegradeConfig,
    pub sample: SampleConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, CliError> {
        let config = match path {
            None => Config::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("config {p:?}: {e}")))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("config {p:?}: {e}")))?
            }
        };
        config
            .model
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    /// SHA-256 over the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config json");
        let digest = Sha256::digest(json.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex
    }

    /// Logs the resolved config and its hash to stderr.
    pub fn announce(&self) {
        eprintln!("config sha256:{}", self.hash());
        eprintln!(
            "resolved config: {}",
            serde_json::to_string(self).expect("config json")
        );
    }
}
