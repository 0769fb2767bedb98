//! Run manifests: the resolved config echo, its content hash, and the seed
//! list, written before any computation starts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use feddle_core::ExperimentConfig;

use crate::errors::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: String,
    pub config: ExperimentConfig,
    /// SHA-256 over the canonical TOML serialization of the resolved config.
    pub config_hash: String,
    pub output_dir: String,
    pub seeds: Vec<u64>,
}

/// Content hash of a resolved config; stable across platforms because it
/// hashes the canonical serialization, not memory layout.
pub fn config_hash(config: &ExperimentConfig) -> CliResult<String> {
    let canonical = toml::to_string(config)
        .map_err(|e| CliError::Parse(format!("cannot serialize config: {e}")))?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
