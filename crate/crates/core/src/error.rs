use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for tensor of rank {rank} in {op}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("sampling contract violated for anchor {anchor}: {reason}")]
    Sampling { anchor: usize, reason: String },

    #[error("evaluation protocol violated for query {query}: no relevant gallery item")]
    Protocol { query: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint has bad magic bytes")]
    BadMagic,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint is truncated")]
    Truncated,

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code per error family, used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. } | Error::Axis { .. } => 3,
            Error::Contract(_) | Error::Sampling { .. } | Error::Protocol { .. } => 4,
            Error::Determinism { .. } | Error::NonFinite { .. } => 5,
            Error::Config(_) | Error::Json(_) => 6,
            Error::BadMagic => 7,
            Error::Version { .. } => 8,
            Error::Truncated => 9,
            Error::Checksum { .. } => 10,
            Error::Io { .. } => 11,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
