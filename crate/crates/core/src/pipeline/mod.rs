//! Config-driven stages: corpus building, training, experiment runs and
//! reports, each recorded in a manifest.

mod commands;
mod config;
mod manifest;
mod report;
mod tables;

use std::path::Path;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::mediation::MediationError;
use crate::model::ModelError;
use crate::tensor::TensorError;

pub use commands::{cmd_build_corpus, cmd_run, cmd_train, load_corpus, RunSummary, TrainSummary};
pub use config::{ExperimentSpec, ModelSpec, PathsConfig, PipelineConfig, PseBase, ReportSpec, Variant};
pub use manifest::{config_hash, file_digest, sha256_hex, RunManifest, TOOLKIT, VERSION};
pub use report::{cmd_report, render_svg, summarize_grid, ReportSummary};
pub use tables::{read_grid, read_loss_curve, write_grid, GridFile, LossRow, EFFECTS_SCHEMA, GRID_SCHEMA};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("empty cohort for {model}: no instance survived the {filter}")]
    EmptyCohort { model: String, filter: String },
    #[error("training target missed: {0}")]
    TargetMissed(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: digest {actual} does not match manifest entry {expected}")]
    Digest {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Mediation(#[from] MediationError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Training { .. } | ModelError::Construction(_) => 4,
        ModelError::Tensor(TensorError::NonFinite { .. }) => 4,
        ModelError::Io(_) => 1,
        _ => 2,
    }
}

fn corpus_code(e: &CorpusError) -> i32 {
    match e {
        CorpusError::Io(_) => 1,
        CorpusError::Model(m) => model_code(m),
        _ => 2,
    }
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 validation, 3 empty cohort, 4 numerical
    /// failure, 1 for I/O and anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) | Self::Parse { .. } | Self::Digest { .. } => 2,
            Self::EmptyCohort { .. } => 3,
            Self::TargetMissed(_) | Self::Numerical(_) => 4,
            Self::Io { .. } => 1,
            Self::Model(e) => model_code(e),
            Self::Corpus(e) => corpus_code(e),
            Self::Mediation(e) => match e {
                MediationError::Model(m) => model_code(m),
                MediationError::Corpus(c) => corpus_code(c),
                MediationError::Degenerate(_) => 4,
                _ => 2,
            },
        }
    }
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    Ok(())
}
