//! Stage orchestration behind the `cbmkit` binary.
//!
//! Every stage reads its inputs from the paths in a [`RunConfig`], writes
//! reports under `output_dir/<stage>/` and records a `stage.json` listing
//! each input and output with its SHA-256 plus the config hash. A stage
//! whose recorded hashes still match is skipped unless forced.

pub mod cli;
mod config;
mod stages;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    apply_override, load_config, EvalSettings, FinalSettings, PathSettings, RunConfig,
    SynthSettings, TheoremSettings,
};
pub use stages::{multiclass_holds, run_stage, Stage, StageOutcome};

use crate::formats::{FileRef, FormatError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_ACCEPTANCE: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("acceptance check failed: {0}")]
    Acceptance(String),
}

impl PipelineError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        PipelineError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } => EXIT_CONFIG,
            PipelineError::Data(_) => EXIT_DATA,
            PipelineError::Numerical(_) => EXIT_NUMERICAL,
            PipelineError::Acceptance(_) => EXIT_ACCEPTANCE,
        }
    }
}

impl From<FormatError> for PipelineError {
    fn from(e: FormatError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<crate::dataset::DatasetError> for PipelineError {
    fn from(e: crate::dataset::DatasetError) -> Self {
        use crate::dataset::DatasetError as E;
        match e {
            E::BadThreshold(t) => PipelineError::config("threshold", format!("{t} not in [0, 1]")),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<crate::cbl::CblError> for PipelineError {
    fn from(e: crate::cbl::CblError) -> Self {
        use crate::cbl::CblError as E;
        match e {
            E::Config(m) => PipelineError::config("cbl", m),
            E::DimMismatch(_) | E::MissingCrop(_) | E::TooFewRows(_) => {
                PipelineError::Data(e.to_string())
            }
            other => PipelineError::Numerical(other.to_string()),
        }
    }
}

impl From<crate::sparse_final::SolverError> for PipelineError {
    fn from(e: crate::sparse_final::SolverError) -> Self {
        use crate::sparse_final::SolverError as E;
        match e {
            E::BadAlpha(_) | E::Invalid(_) => PipelineError::config("final", e.to_string()),
            E::DimMismatch(_) | E::LabelOutOfRange { .. } => PipelineError::Data(e.to_string()),
            other => PipelineError::Numerical(other.to_string()),
        }
    }
}

impl From<crate::metrics::MetricsError> for PipelineError {
    fn from(e: crate::metrics::MetricsError) -> Self {
        use crate::metrics::MetricsError as E;
        match e {
            E::Cbl(c) => c.into(),
            E::Solver(s) => s.into(),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<crate::leakage::LeakageError> for PipelineError {
    fn from(e: crate::leakage::LeakageError) -> Self {
        use crate::leakage::LeakageError as E;
        match e {
            E::Invalid(m) => PipelineError::config("theorem", m),
            E::Solver(s) => s.into(),
            E::Cbl(c) => c.into(),
            other => PipelineError::Numerical(other.to_string()),
        }
    }
}

impl From<crate::explain::ExplainError> for PipelineError {
    fn from(e: crate::explain::ExplainError) -> Self {
        match e {
            crate::explain::ExplainError::Cbl(c) => c.into(),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<crate::synth::SynthError> for PipelineError {
    fn from(e: crate::synth::SynthError) -> Self {
        PipelineError::config("synth", e.to_string())
    }
}

/// Record written next to a stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
}

impl StageManifest {
    pub const FILE_NAME: &'static str = "stage.json";

    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(Self::FILE_NAME)
    }

    pub fn build(
        stage: &str,
        config_hash: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<Self, FormatError> {
        let refs = |ps: &[PathBuf]| ps.iter().map(|p| FileRef::of(p)).collect::<Result<_, _>>();
        Ok(StageManifest {
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            inputs: refs(inputs)?,
            outputs: refs(outputs)?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), FormatError> {
        let path = Self::path_in(dir);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| FormatError::io(path, e))
    }

    pub fn read(dir: &Path) -> Option<Self> {
        let text = fs::read_to_string(Self::path_in(dir)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// True when the config hash matches and every listed file still hashes
    /// to its recorded value.
    pub fn is_current(&self, config_hash: &str, inputs: &[PathBuf]) -> bool {
        self.config_hash == config_hash
            && self.inputs.len() == inputs.len()
            && self.inputs.iter().zip(inputs).all(|(r, p)| r.path == *p)
            && self
                .inputs
                .iter()
                .chain(&self.outputs)
                .all(|r| r.verify().is_ok())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| FormatError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| FormatError::io(path, e).into())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}
