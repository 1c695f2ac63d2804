use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the crate.
///
/// [`Error::is_validation`] separates caller mistakes (bad shapes, bad
/// config, bad files) from failures that only surface while running
/// (non-finite values, degenerate geometry).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {op}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("degenerate input to {op}: norm {norm:e} below {eps:e}")]
    Degenerate {
        op: &'static str,
        norm: f64,
        eps: f64,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("graph already consumed by a previous backward pass")]
    StaleGraph,

    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocabulary { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("length mismatch in {op}: {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset format version {found} does not match supported version {expected}")]
    FormatVersion { found: u32, expected: u32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch sample ids {sample_ids:?}): {detail}")]
    NanLoss {
        step: u64,
        sample_ids: Vec<u64>,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by invalid inputs or configuration rather
    /// than by the numerics of a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. }
                | Error::InvalidShape { .. }
                | Error::OutOfVocabulary { .. }
                | Error::SequenceTooLong { .. }
                | Error::LengthMismatch { .. }
                | Error::Config(_)
                | Error::FormatVersion { .. }
                | Error::Json { .. }
                | Error::Io { .. }
                | Error::Checkpoint(_)
        )
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, Error::Degenerate { .. })
    }
}
