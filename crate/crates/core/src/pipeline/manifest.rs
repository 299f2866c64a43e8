use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandEntry {
    pub config_sha256: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub artifacts: Vec<FileHash>,
    pub notes: BTreeMap<String, String>,
}

/// Latest run of each command in one output directory. No timestamps, so
/// identical runs give identical manifests.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub commands: BTreeMap<String, CommandEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self> {
        let p = out.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Manifest::default());
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Every listed file still hashes to its recorded value.
    pub fn verify(&self, out: &Path) -> Result<Vec<String>> {
        let mut stale = Vec::new();
        for e in self.commands.values() {
            for f in &e.artifacts {
                let p = out.join(&f.path);
                if !p.exists() || sha256_file(&p)? != f.sha256 {
                    stale.push(f.path.clone());
                }
            }
        }
        Ok(stale)
    }
}
