use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineConfig, PipelineError, Result};

pub const TOOLKIT: &str = "ragtrace";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Digest of the config's canonical JSON form (after any overrides).
pub fn config_hash(config: &PipelineConfig) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

/// Per-stage record: what ran, from which inputs, producing which outputs.
/// File keys are paths relative to the output directory where possible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit: String,
    pub version: String,
    pub stage: String,
    pub config_hash: String,
    pub timings_ms: BTreeMap<String, f64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(stage: &str, config: &PipelineConfig) -> Self {
        Self {
            toolkit: TOOLKIT.into(),
            version: VERSION.into(),
            stage: stage.into(),
            config_hash: config_hash(config),
            timings_ms: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn path_for(config: &PipelineConfig, stage: &str) -> PathBuf {
        config.output_dir().join("manifests").join(format!("{stage}.json"))
    }

    pub fn key(config: &PipelineConfig, path: &Path) -> String {
        let out = config.output_dir();
        path.strip_prefix(&out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn add_input(&mut self, config: &PipelineConfig, path: &Path) -> Result<()> {
        self.inputs.insert(Self::key(config, path), file_digest(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, config: &PipelineConfig, path: &Path) -> Result<()> {
        self.outputs.insert(Self::key(config, path), file_digest(path)?);
        Ok(())
    }

    pub fn time(&mut self, label: &str, since: std::time::Instant) {
        self.timings_ms
            .insert(label.into(), since.elapsed().as_secs_f64() * 1e3);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| PipelineError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}
