use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use doge_core::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl ArtifactHash {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_owned(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Everything needed to replay a command and check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved configuration as `key = value` lines.
    pub config: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub inputs: Vec<ArtifactHash>,
    /// Paths relative to `out_dir`.
    pub outputs: Vec<ArtifactHash>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub tool_version: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Inputs whose current contents no longer match the recorded hash.
    pub fn stale_inputs(&self) -> Vec<PathBuf> {
        self.inputs
            .iter()
            .filter(|a| sha256_file(&a.path).map_or(true, |h| h != a.sha256))
            .map(|a| a.path.clone())
            .collect()
    }

    /// Outputs under `dir` that differ from the recorded hashes.
    pub fn mismatched_outputs(&self, dir: &Path) -> Vec<PathBuf> {
        self.outputs
            .iter()
            .filter(|a| sha256_file(&dir.join(&a.path)).map_or(true, |h| h != a.sha256))
            .map(|a| a.path.clone())
            .collect()
    }
}
