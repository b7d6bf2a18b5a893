//! `manifest.json`: the content hash of every artifact in an output
//! directory, the stage that wrote it and the hashes it was built from.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub stage: String,
    /// Fingerprint of the config the stage ran under.
    pub config: String,
    /// Upstream artifact name to the hash it had when this one was built.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    /// Fingerprint of the data-affecting config keys at `gen-data` time.
    pub data_fingerprint: String,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = Self::path(dir);
        let text = fs::read_to_string(&p).map_err(|e| {
            Error::Missing(format!("{}: {e} (run gen-data first)", p.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(Self::path(dir), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Hashes `dir/name` and records it; returns the hash.
    pub fn record(
        &mut self,
        dir: &Path,
        name: &str,
        stage: &str,
        config: &str,
        inputs: &[(&str, &str)],
    ) -> Result<String> {
        let sha = hash_file(&dir.join(name))?;
        self.artifacts.insert(
            name.to_string(),
            ArtifactEntry {
                sha256: sha.clone(),
                stage: stage.to_string(),
                config: config.to_string(),
                inputs: inputs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            },
        );
        Ok(sha)
    }

    /// Checks that `dir/name` still has the recorded hash; returns it.
    pub fn verify(&self, dir: &Path, name: &str) -> Result<String> {
        let entry = self
            .artifacts
            .get(name)
            .ok_or_else(|| Error::Missing(format!("{name} is not in the manifest")))?;
        let found = hash_file(&dir.join(name))?;
        if found != entry.sha256 {
            return Err(Error::HashMismatch {
                artifact: name.to_string(),
                expected: entry.sha256.clone(),
                found,
            });
        }
        Ok(found)
    }

    pub fn check_data(&self, data_fingerprint: &str) -> Result<()> {
        if self.data_fingerprint != data_fingerprint {
            return Err(Error::HashMismatch {
                artifact: "data config".into(),
                expected: self.data_fingerprint.clone(),
                found: data_fingerprint.to_string(),
            });
        }
        Ok(())
    }
}
