//! Crate-wide error type.

use std::path::PathBuf;

/// Everything that can go wrong across the engine, from tensor shape
/// mismatches to corrupt checkpoint files.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {id} out of range [0, {bound})")]
    IndexOutOfRange { id: usize, bound: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("graph usage: {0}")]
    GraphUsage(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("tokenizer training: {0}")]
    TokenizerTraining(String),

    #[error("tokenizer file: {0}")]
    TokenizerFormat(String),

    #[error("checkpoint version mismatch: found {found}, supported {supported}")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint truncated or corrupt: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint shape mismatch for `{name}`: header {header:?} vs blob {blob:?}")]
    CheckpointShape {
        name: String,
        header: Vec<usize>,
        blob: Vec<usize>,
    },

    #[error("parameter import: {0}")]
    Import(String),

    #[error("training: {0}")]
    Training(String),

    #[error("text generation: {0}")]
    Generation(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
