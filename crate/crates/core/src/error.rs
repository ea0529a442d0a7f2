use std::path::PathBuf;

use tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("scene graph syntax error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown {kind} {value:?}")]
    Vocabulary { kind: &'static str, value: String },

    #[error("edge {edge} references unknown node {id:?}")]
    Reference { edge: usize, id: String },

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("length mismatch in {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },

    #[error("node {0:?} has no bounding box")]
    MissingBox(String),

    #[error("scene generation failed after {attempts} attempts (seed {seed})")]
    GenerationBudget { seed: u64, attempts: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: String, expected: String },

    #[error("checkpoint tensor {name:?}: {reason}")]
    CheckpointTensor { name: String, reason: String },

    #[error("non-finite loss at step {step}; batch dumped to {dump}")]
    NonFiniteLoss { step: usize, dump: PathBuf },

    #[error("edit cannot reuse stored sampler state: {0}")]
    StaleState(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: invalid image: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than internal faults.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Vocabulary { .. }
                | Error::Reference { .. }
                | Error::Constraint(_)
                | Error::LengthMismatch { .. }
                | Error::MissingBox(_)
                | Error::Checkpoint(_)
                | Error::CheckpointVersion { .. }
                | Error::CheckpointTensor { .. }
                | Error::StaleState(_)
                | Error::Json { .. }
                | Error::Image { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
