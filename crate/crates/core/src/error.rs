use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in layer {layer} ({kind})")]
    NumericOverflow { layer: usize, kind: &'static str },

    #[error("non-finite gradient in layer {layer} ({kind})")]
    NonFiniteGradient { layer: usize, kind: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    Empty(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("stage {stage} filtered out every nodule in the suspicious set (threshold too aggressive)")]
    StageLostMinority { stage: usize },

    #[error("fold {fold} has no nodules in its training portion")]
    FoldWithoutMinority { fold: usize },

    #[error("candidate {0} has no patch in the store")]
    MissingPatch(u64),

    #[error("phase `{phase}` failed: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Whether the failure stems from bad configuration or arguments
    /// rather than from running the job.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Phase { source, .. } => source.is_usage(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
