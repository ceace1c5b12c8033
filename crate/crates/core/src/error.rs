// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

/// Toolkit error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A model or planted-specialization configuration is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A token id is outside the model vocabulary.
    #[error("token id {token} at position {position} is outside the vocabulary of {vocab_size}")]
    OutOfVocab {
        token: usize,
        position: usize,
        vocab_size: usize,
    },

    /// Two inputs disagree on the (layer, expert) grid.
    #[error("expert grid mismatch: {0}")]
    GridMismatch(String),

    /// An expert index or layer index is outside its grid.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A statistic received no records.
    #[error("empty input: {0}")]
    Empty(String),

    /// A probability vector failed validation.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// Vector lengths that must agree do not.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// An operation needs data the input does not carry (e.g. Gini on a
    /// trace recorded without logits).
    #[error("{operation} requires {requirement}")]
    Capability {
        operation: &'static str,
        requirement: &'static str,
    },

    /// A trace line failed to parse or violates the trace contract.
    #[error("trace line {line}: {field}: {message}")]
    Trace {
        line: usize,
        field: String,
        message: String,
    },

    /// The trace header advertises an unsupported format version.
    #[error("unsupported trace format version {0}")]
    UnsupportedVersion(u32),

    /// A paired analysis is missing one side of a pair.
    #[error("missing pair member: {0}")]
    MissingPair(String),

    /// Fewer reference samples are available than requested.
    #[error("requested {requested} samples but only {available} are available")]
    InsufficientSamples { requested: usize, available: usize },

    /// An unknown model preset name.
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
