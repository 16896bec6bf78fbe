//! Predictor checkpoints as JSON:
//! `{"version": 1, "meta": {...}, "params": {name: {"shape": [...], "data": [...]}}}`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use dpm_covlab_core::net::{BundleMeta, PredictorBundle};
use dpm_covlab_core::Schedule;
use serde::{Deserialize, Serialize};

pub const VERSION: u64 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u64,
    meta: BundleMeta,
    params: BTreeMap<String, Tensor>,
}

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    Corrupt(String),
    Version(u64),
    Architecture(dpm_covlab_core::Error),
    Dimension { expected: usize, found: usize },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "cannot read checkpoint: {e}"),
            CheckpointError::Corrupt(m) => write!(f, "corrupt checkpoint: {m}"),
            CheckpointError::Version(v) => write!(f, "checkpoint version {v} is not supported (expected {VERSION})"),
            CheckpointError::Architecture(e) => write!(f, "checkpoint does not match its architecture: {e}"),
            CheckpointError::Dimension { expected, found } => {
                write!(f, "checkpoint has data dimension {found}, expected {expected}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

pub fn save(bundle: &PredictorBundle, path: &Path) -> anyhow::Result<()> {
    let params = bundle
        .tensors()
        .map(|(spec, data)| (spec.name.clone(), Tensor { shape: spec.shape.clone(), data: data.to_vec() }))
        .collect();
    let file = CheckpointFile { version: VERSION, meta: bundle.meta.clone(), params };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PredictorBundle, CheckpointError> {
    let bytes = std::fs::read(path).map_err(CheckpointError::Io)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(VERSION) => {}
        Some(v) => return Err(CheckpointError::Version(v)),
        None => return Err(CheckpointError::Corrupt("missing version".into())),
    }
    let file: CheckpointFile = serde_json::from_value(value).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let tensors: Vec<(String, Vec<usize>, Vec<f64>)> =
        file.params.into_iter().map(|(name, t)| (name, t.shape, t.data)).collect();
    PredictorBundle::from_tensors(file.meta, &tensors).map_err(CheckpointError::Architecture)
}

/// Loads and checks the data dimension.
pub fn load_for(path: &Path, dim: usize) -> Result<PredictorBundle, CheckpointError> {
    let bundle = load(path)?;
    if bundle.config().dim != dim {
        return Err(CheckpointError::Dimension { expected: dim, found: bundle.config().dim });
    }
    Ok(bundle)
}

/// A warning when the bundle was trained on a different discrete schedule.
pub fn schedule_warning(bundle: &PredictorBundle, schedule: &Schedule) -> Option<String> {
    match bundle.meta.schedule_hash {
        Some(h) if h != schedule.fingerprint() => Some(format!(
            "checkpoint was trained on schedule {h:016x}, but the configured schedule is {:016x}",
            schedule.fingerprint()
        )),
        _ => None,
    }
}
