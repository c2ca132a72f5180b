//! Run manifest: config hash, code version, per-stage input/output file
//! digests, and wall-clock times. Re-running a stage on identical inputs
//! must reproduce identical output digests.

use crate::config::hex;
use crate::HarnessError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u128,
}

impl RunManifest {
    pub fn load_or_new(path: &Path, config_hash: &str) -> Result<RunManifest, HarnessError> {
        if path.exists() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Io(format!("read manifest: {e}")))?;
            let manifest: RunManifest = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("manifest parse: {e}")))?;
            if manifest.config_hash != config_hash {
                return Err(HarnessError::Config(format!(
                    "output directory belongs to config {}, current config is {config_hash}; \
                     use a fresh out_dir",
                    manifest.config_hash
                )));
            }
            Ok(manifest)
        } else {
            Ok(RunManifest {
                config_hash: config_hash.to_string(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                stages: BTreeMap::new(),
            })
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::Io(format!("manifest serialize: {e}")))?;
        crate::write_atomic(path, text.as_bytes())
    }

    pub fn record_stage(
        &mut self,
        stage: &str,
        inputs: &[&Path],
        outputs: &[&Path],
        wall_ms: u128,
    ) -> Result<(), HarnessError> {
        let digest_map = |paths: &[&Path]| -> Result<BTreeMap<String, String>, HarnessError> {
            let mut map = BTreeMap::new();
            for p in paths {
                map.insert(p.display().to_string(), file_digest(p)?);
            }
            Ok(map)
        };
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                inputs: digest_map(inputs)?,
                outputs: digest_map(outputs)?,
                wall_ms,
            },
        );
        Ok(())
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.stages.contains_key(stage)
    }
}

pub fn file_digest(path: &Path) -> Result<String, HarnessError> {
    let bytes = std::fs::read(path)
        .map_err(|e| HarnessError::Io(format!("digest {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}
