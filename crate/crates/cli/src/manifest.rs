use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use perpcs::container::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRecord {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub kind: String,
    /// SHA-256 of the file bytes.
    pub hash: String,
    pub command: String,
    /// Key of the stage run that wrote it.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub key: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactManifest {
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl ArtifactManifest {
    pub fn load_or_default(out: &Path) -> Result<Self> {
        let p = out.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&p)?;
        serde_json::from_str(&text).with_context(|| format!("reading {}", p.display()))
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(out.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Writes `bytes` under `out/path` and records it.
    pub fn put(&mut self, out: &Path, name: &str, path: &str, kind: &str, bytes: &[u8], command: &str, key: &str) -> Result<()> {
        let full = out.join(path);
        if let Some(dir) = full.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&full, bytes).with_context(|| format!("writing {}", full.display()))?;
        self.artifacts.insert(
            name.to_string(),
            ArtifactRecord {
                path: PathBuf::from(path),
                kind: kind.to_string(),
                hash: sha256_hex(bytes),
                command: command.to_string(),
                config_hash: key.to_string(),
            },
        );
        Ok(())
    }

    /// Reads an artifact after checking its bytes against the recorded hash.
    pub fn get(&self, out: &Path, name: &str, stage: &'static str) -> Result<Vec<u8>> {
        let rec = self.artifacts.get(name).ok_or_else(|| CliError::Missing {
            name: name.to_string(),
            stage,
        })?;
        let full = out.join(&rec.path);
        let bytes = std::fs::read(&full).map_err(|_| CliError::Missing {
            name: name.to_string(),
            stage,
        })?;
        let found = sha256_hex(&bytes);
        if found != rec.hash {
            return Err(CliError::Hash {
                name: name.to_string(),
                expected: rec.hash.clone(),
                found,
            }
            .into());
        }
        Ok(bytes)
    }

    pub fn has(&self, name: &str) -> bool {
        self.artifacts.contains_key(name)
    }

    /// Names with the given kind, in name order.
    pub fn of_kind(&self, kind: &str) -> Vec<String> {
        self.artifacts.iter().filter(|(_, r)| r.kind == kind).map(|(n, _)| n.clone()).collect()
    }

    /// True when `stage` last ran with `key` and its outputs still verify.
    pub fn is_current(&self, out: &Path, stage: &str, key: &str) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.key == key
            && rec.outputs.iter().all(|n| {
                self.artifacts
                    .get(n)
                    .and_then(|a| std::fs::read(out.join(&a.path)).ok())
                    .is_some_and(|b| sha256_hex(&b) == self.artifacts[n].hash)
            })
    }

    pub fn finish_stage(&mut self, stage: &str, key: &str, outputs: Vec<String>) {
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                key: key.to_string(),
                outputs,
            },
        );
    }
}
