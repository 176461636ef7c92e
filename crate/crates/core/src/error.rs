use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree; the message names the primitive and both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A tape was used out of order (backward before forward, foreign variable).
    #[error("tape state: {0}")]
    State(String),

    #[error("non-finite input to {op} at index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("rotation angle {angle} too close to pi for a well-conditioned log")]
    IllConditionedLog { angle: f64 },

    #[error("every pixel of the warped patch was masked")]
    EmptyWarp,

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("pose optimizer diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),

    #[error("degenerate view: {0}")]
    DegenerateView(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint config hash {found:016x} does not match configuration hash {expected:016x}")]
    ConfigHashMismatch { expected: u64, found: u64 },

    #[error("parse error in {source_name} line {line}: {message}")]
    Parse { source_name: String, line: usize, message: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse { source_name: source_name.into(), line, message: message.into() }
    }
}
