//! Run manifests, written beside a command's outputs once it has succeeded.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use surgphase_core::{Error, Result};

use crate::config::PipelineConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
    pub config: Option<PipelineConfig>,
    pub reference_indices: Option<Vec<usize>>,
    pub formats: Value,
    pub outputs: Vec<String>,
    pub results: Value,
}

impl Manifest {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            argv,
            seed: None,
            config_digest: None,
            config: None,
            reference_indices: None,
            formats: serde_json::json!({
                "stage1_checkpoint": "surgphase-stage1 v1",
                "temporal_checkpoint": "surgphase-tcn v1",
                "feature_cache": "SPFEAT v1",
                "predictions": "second/gt_phase/pred_phase TSV",
            }),
            outputs: Vec::new(),
            results: Value::Null,
        }
    }

    pub fn with_config(mut self, cfg: &PipelineConfig) -> Self {
        self.seed = Some(cfg.seed);
        self.config_digest = Some(cfg.digest());
        self.config = Some(cfg.clone());
        self
    }

    /// Records `paths` relative to `dir` where possible.
    pub fn outputs(mut self, dir: &Path, paths: &[PathBuf]) -> Self {
        self.outputs = paths
            .iter()
            .map(|p| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned())
            .collect();
        self
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let io = |path: &Path, e: std::io::Error| Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.partial"));
        let text = serde_json::to_string_pretty(self).expect("manifest serialises") + "\n";
        std::fs::write(&tmp, text).map_err(|e| io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| io(&path, e))?;
        Ok(path)
    }
}

/// Removes a manifest left by an earlier run so a failure leaves none.
pub fn clear(dir: &Path) {
    let _ = std::fs::remove_file(dir.join(MANIFEST_FILE));
}
