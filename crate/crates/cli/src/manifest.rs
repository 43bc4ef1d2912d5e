//! Run manifests: one `manifest.toml` per output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use minc_core::trainer::TrainConfig;
use minc_core::BlockGraphParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub status: String,
    pub dataset: DatasetRef,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<BlockGraphParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSettings>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSettings {
    pub dim: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, dataset: DatasetRef) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            status: "ok".to_string(),
            dataset,
            artifacts: BTreeMap::new(),
            generator: None,
            config: None,
            oracle: None,
        }
    }

    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing manifest")?;
        let path = Self::path_in(dir);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Fails unless the recorded dataset still hashes to the recorded value.
    pub fn verify_dataset(&self) -> Result<()> {
        let actual = sha256_file(Path::new(&self.dataset.path))?;
        if actual != self.dataset.sha256 {
            bail!("dataset {} changed: hash {actual} but manifest records {}", self.dataset.path, self.dataset.sha256);
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Reference to a dataset file by absolute path and content hash.
pub fn dataset_ref(path: &Path) -> Result<DatasetRef> {
    let abs = fs::canonicalize(path).with_context(|| format!("dataset {} not found", path.display()))?;
    Ok(DatasetRef { sha256: sha256_file(&abs)?, path: abs.to_string_lossy().into_owned() })
}
