//! Declarative experiment configuration: one JSON tree, CLI overrides via
//! dotted paths, and a canonical content hash that doubles as the run id.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;

use crate::HarnessError;
use conflictlens_core::conflictgen::SynthSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root seed; every stage derives named sub-streams from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub probe: ProbeSettings,
    pub cluster: ClusterConfig,
    pub intervention: InterventionConfig,
    /// Caption template used for every prompt in the run.
    pub template_index: usize,
    /// Worker threads for sweep/probe/cluster parallelism; 0 = all cores.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 17,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelDims::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeSettings::default(),
            cluster: ClusterConfig::default(),
            intervention: InterventionConfig::default(),
            template_index: 0,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_train_images: usize,
    pub n_eval_images: usize,
    /// Images per held-out transfer dataset (two are generated).
    pub n_transfer_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic(SynthSpec::default()),
            n_train_images: 600,
            n_eval_images: 360,
            n_transfer_images: 240,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    /// CIFAR-10 binary batch files, pooled to 4x4 grids of (r, g, b).
    Cifar10 { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_seq: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            n_layers: 4,
            n_heads: 8,
            d_model: 64,
            max_seq: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Fraction of conflicting training prompts supervised with the
    /// caption label regardless of target modality: 0.5 balanced,
    /// 0.9 caption-biased, 0.1 image-biased.
    pub rho: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Conflicting prompts emitted per training image (split over both
    /// target modalities).
    pub conflicts_per_image: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rho: 0.5,
            epochs: 20,
            batch_size: 32,
            lr: 3e-3,
            conflicts_per_image: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_pairs_per_condition: usize,
    /// When set, a prediction counts as out-of-option unless the global
    /// argmax over the full vocabulary lands on an answer-class token.
    pub strict_out_of_option: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_pairs_per_condition: 200,
            strict_out_of_option: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            epochs: 1000,
            batch_size: 256,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    /// K-Means initializations averaged into each reported V-Measure.
    pub n_seeds: usize,
    /// Restarts per initialization, best inertia kept.
    pub n_init: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n_seeds: 3,
            n_init: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionConfig {
    /// Tolerance for the ε-monotone trend tests.
    pub epsilon: f64,
    /// Conflicting pairs per target modality in the sweep evaluation set.
    pub n_sweep_pairs: usize,
    /// Fixed α for cross-dataset transfer.
    pub transfer_alpha: f32,
    /// Explicit (layer, head) for transfer; otherwise the best classified
    /// head by intervenability is chosen.
    pub transfer_head: Option<(usize, usize)>,
    /// Apply interventions at every position instead of the answer
    /// position only (ablation-study mode; sweeps still use the answer
    /// position as published).
    pub all_positions: bool,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            epsilon: 0.05,
            n_sweep_pairs: 100,
            transfer_alpha: 10.0,
            transfer_head: None,
            all_positions: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Canonical serialization: JSON with sorted keys, no whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        // serde_json maps are BTreeMaps: key order is already sorted.
        serde_json::to_string(&value).expect("value serializes")
    }

    /// Run id: hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        hex(&hasher.finalize())
    }

    /// Apply one `key=value` override using a dotted path into the JSON
    /// tree, e.g. `train.rho=0.9` or `out_dir="runs/biased"`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), HarnessError> {
        let (path, raw) = assignment.split_once('=').ok_or_else(|| {
            HarnessError::Config(format!("override '{assignment}' is not key=value"))
        })?;
        let mut value = serde_json::to_value(&*self).expect("config serializes");
        let mut cursor = &mut value;
        let parts: Vec<&str> = path.split('.').collect();
        let (last, walk) = parts.split_last().expect("split_once yielded a path");
        for (i, part) in walk.iter().enumerate() {
            cursor = cursor
                .as_object_mut()
                .ok_or_else(|| {
                    HarnessError::Config(format!("'{}' is not an object", parts[..i].join(".")))
                })?
                .get_mut(*part)
                .ok_or_else(|| HarnessError::Config(format!("unknown config key '{path}'")))?;
        }
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("'{path}' parent is not an object")))?;
        let new: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        obj.insert(last.to_string(), new);
        *self = serde_json::from_value(value)
            .map_err(|e| HarnessError::Config(format!("override '{assignment}': {e}")))?;
        Ok(())
    }

    /// Environment override hook: CONFLICTLENS_SEED replaces the root seed.
    pub fn apply_env(&mut self) -> Result<(), HarnessError> {
        if let Ok(seed) = std::env::var("CONFLICTLENS_SEED") {
            self.seed = seed
                .parse()
                .map_err(|_| HarnessError::Config(format!("CONFLICTLENS_SEED '{seed}' is not a u64")))?;
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
