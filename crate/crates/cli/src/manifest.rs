//! The run manifest: one JSON file per run directory describing what was
//! configured, what has been produced, and the conventions in force.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use scion_core::distill::LOSS_CONVENTION;
use scion_core::netzoo::FLOP_CONVENTION;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const FILE_NAME: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    /// Stopped after a requested step short of the full pipeline.
    Partial,
    Complete,
    Failed,
}

/// Conventions another implementation would need to reproduce the numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub loss: String,
    pub flops: String,
    pub block_indices: String,
    pub lr_scaling: String,
    pub train_acc: String,
    pub normalization_mean: Vec<f64>,
    pub normalization_std: Vec<f64>,
    pub augmentation: String,
    pub scion_norm: String,
    pub scalar: String,
}

impl Conventions {
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        let augmentation = match cfg.padding() {
            Some(p) => format!("random crop with {p}px zero padding, horizontal flip p=0.5"),
            None => "none".into(),
        };
        Self {
            loss: LOSS_CONVENTION.into(),
            flops: FLOP_CONVENTION.into(),
            block_indices: "1-based; the last scion carries the student classifier".into(),
            lr_scaling: "lr = base_lr * batch_size / 64".into(),
            train_acc: "top-1 agreement with the teacher on augmented few-shot batches".into(),
            normalization_mean: cfg.dataset.mean.clone(),
            normalization_std: cfg.dataset.std.clone(),
            augmentation,
            scion_norm: format!("{:?}", cfg.scion_norm).to_lowercase(),
            scalar: if std::mem::size_of::<scion_core::Scalar>() == 8 { "f64" } else { "f32" }.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub code_version: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    /// Last step attempted, and the error if it failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The validated configuration, in TOML.
    pub config: String,
    pub conventions: Conventions,
    /// Named checkpoint directories, relative to the run directory.
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub metrics: BTreeMap<String, f64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let t = now();
        Self {
            status: RunStatus::Running,
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            created_unix: t,
            updated_unix: t,
            failed_at: None,
            error: None,
            config: cfg.to_toml(),
            conventions: Conventions::for_config(cfg),
            checkpoints: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(FILE_NAME)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Writes via a temporary file and rename, so readers never see a torn manifest.
    pub fn save(&mut self, run_dir: &Path) -> Result<()> {
        self.updated_unix = now();
        fs::create_dir_all(run_dir)?;
        let path = Self::path(run_dir);
        let tmp = run_dir.join(format!("{FILE_NAME}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::tests::MINIMAL;

    #[test]
    fn save_replaces_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::parse(MINIMAL, "t.toml").unwrap();
        let mut m = RunManifest::new(&cfg);
        m.save(dir.path()).unwrap();
        m.metrics.insert("student_acc".into(), 0.5);
        m.status = RunStatus::Complete;
        m.save(dir.path()).unwrap();
        let back = RunManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(files, vec![std::ffi::OsString::from(FILE_NAME)]);
        assert_eq!(back.conventions.normalization_mean, vec![0.5; 3]);
    }
}
