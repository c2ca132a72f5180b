//! Pipeline harness for the conflicting-input workbench: configuration,
//! stage orchestration with a dependency DAG, activation caching,
//! reproducible manifests, and report emission.

pub mod cache;
pub mod config;
pub mod manifest;
pub mod report;
pub mod stages;

pub use config::ExperimentConfig;
pub use manifest::RunManifest;
pub use stages::{run_pipeline, run_stage, Stage};

use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage '{stage}' needs '{needs}' to run first")]
    Dependency { stage: String, needs: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(String),
}

impl HarnessError {
    /// Process exit code: 2 config, 3 dependency, 4 numerical (io counts
    /// as a numerical/environment failure).
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Dependency { .. } => 3,
            HarnessError::Numerical(_) | HarnessError::Io(_) => 4,
        }
    }
}

impl From<conflictlens_core::model::ModelError> for HarnessError {
    fn from(e: conflictlens_core::model::ModelError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<conflictlens_core::conflictgen::DataError> for HarnessError {
    fn from(e: conflictlens_core::conflictgen::DataError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<conflictlens_core::probelab::ProbeError> for HarnessError {
    fn from(e: conflictlens_core::probelab::ProbeError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<conflictlens_core::saliencelab::SalienceError> for HarnessError {
    fn from(e: conflictlens_core::saliencelab::SalienceError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<conflictlens_core::intervene::InterveneError> for HarnessError {
    fn from(e: conflictlens_core::intervene::InterveneError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

/// Write bytes to a temp file in the target directory, then rename into
/// place. Readers never observe partial artifacts.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let dir = path
        .parent()
        .ok_or_else(|| HarnessError::Io(format!("{} has no parent", path.display())))?;
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(e.to_string()))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().unwrap_or_default().to_string_lossy(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| HarnessError::Io(e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::Io(e.to_string()))?;
    Ok(())
}
