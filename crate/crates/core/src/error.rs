use std::io;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },

    #[error("mixer kind mismatch: expected {expected}, found {found}")]
    MixerKind { expected: String, found: String },

    #[error("precision mismatch: expected {expected}, found {found}")]
    Precision { expected: String, found: String },

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(
        "training diverged at step {step}: loss {loss} stayed above {threshold} for {window} steps"
    )]
    Diverged {
        step: u64,
        loss: f64,
        threshold: f64,
        window: usize,
    },

    #[error("benchmark error: {0}")]
    Bench(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
