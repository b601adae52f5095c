use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the cellvar pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV input at line(s) {}: {detail}", join_lines(.lines))]
    MalformedRows { lines: Vec<u64>, detail: String },

    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid trace for cell `{cell}`: {reason}")]
    InvalidTrace { cell: String, reason: String },

    #[error("dataset has {found} usable cells; at least {required} are required")]
    TooFewCells { found: usize, required: usize },

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("parameter domain error: {0}")]
    Domain(String),

    #[error("trace normalization {found:?} does not match model requirement {expected:?}")]
    NormalizationMismatch {
        expected: crate::dataset::Normalization,
        found: Option<crate::dataset::Normalization>,
    },

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("population truth error: {0}")]
    Truth(String),

    #[error("study aborted: {0}")]
    StudyAborted(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

fn join_lines(lines: &[u64]) -> String {
    lines
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
