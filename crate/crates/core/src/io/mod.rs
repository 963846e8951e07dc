//! Checkpoint manifests, reports, run configs and command implementations.

mod commands;
mod config;
mod json;
mod manifest;

pub use commands::{
    cmd_analyze, cmd_plan, cmd_schedule, cmd_train, AnalysisReport, LayerRecord, PlanDocument, PlanMeta,
    RunSummary, ScheduleRequest,
};
pub use config::RunConfig;
pub use json::{to_json_string, write_json};
pub use manifest::{load_manifest, save_manifest, Dtype, Manifest, ManifestLayer};

use thiserror::Error;

use crate::spectral::SpectralError;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("byte range error: {0}")]
    ByteRange(String),
    #[error("i/o error on {path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no analyzable matrix in manifest")]
    NothingToAnalyze,
    #[error("every layer failed to fit: {0}")]
    AllLayersFailed(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

impl IoError {
    pub(crate) fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.display().to_string(),
            source,
        }
    }
}

/// A float with 17 significant digits in scientific notation (`1.0000000000000000e-3`).
///
/// 17 digits round-trip every `f64` exactly.
pub fn sig17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}
