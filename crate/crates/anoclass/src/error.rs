use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure modes of
/// the pipeline stages so callers can match on what went wrong.
#[derive(Debug, Error)]
pub enum Error {
    /// I/O failure with the path that caused it.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A weights / feature / bank / checkpoint file could not be loaded.
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    /// A model is missing a capability the pipeline requires.
    #[error("backbone capability missing: {0}")]
    Capability(String),

    /// Tensor or grid dimensions do not match what an operation expects.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Grid sizes cannot be aligned by an integer factor.
    #[error("grid alignment error: {0}")]
    Alignment(String),

    /// A parameter is outside its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Requested pooling target exceeds what the input provides.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The episodic protocol cannot be satisfied by the data at hand.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An episode with S=1 has no support left once the query is removed.
    #[error("degenerate episode: shot count must be at least 2")]
    DegenerateEpisode,

    /// The composed defect mask came out empty; the caller should resample.
    #[error("defect mask is empty after foreground intersection")]
    EmptyMask,

    /// Dataset directory layout does not match the expected contract.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Category has fewer than two defect types and is excluded from the task.
    #[error("category {category} excluded: only {defect_types} defect type(s)")]
    ExcludedCategory {
        category: String,
        defect_types: usize,
    },

    /// Malformed binary or JSON artifact.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Configuration file problems.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
