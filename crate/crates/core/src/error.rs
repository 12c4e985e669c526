// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by the editing engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape {
        /// Operation that rejected its operands.
        op: &'static str,
        /// Human-readable description of the offending shapes.
        detail: String,
    },

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    /// A word is missing from the tokenizer vocabulary.
    #[error("word {0:?} is not in the vocabulary")]
    OutOfVocab(String),

    /// A token id does not index into the vocabulary.
    #[error("token id {id} is out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        /// Offending id.
        id: usize,
        /// Vocabulary size.
        vocab_size: usize,
    },

    /// A position span does not fit the sequence it refers to.
    #[error("span [{start}, {end}) is out of range for sequence of length {len}")]
    SpanOutOfRange {
        /// Inclusive start.
        start: usize,
        /// Exclusive end.
        end: usize,
        /// Sequence length.
        len: usize,
    },

    /// Sequence longer than the model context.
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong {
        /// Requested length.
        len: usize,
        /// Model limit.
        max: usize,
    },

    /// An input that must be non-empty was empty.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A configuration value violates its documented range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Optimization produced a NaN loss.
    #[error("loss diverged (NaN) at step {step}")]
    Divergence {
        /// Zero-based step index.
        step: usize,
    },

    /// The subject tokens do not occur in a prompt.
    #[error("subject {subject:?} does not occur in prompt {prompt:?}")]
    SubjectNotFound {
        /// Subject text.
        subject: String,
        /// Prompt text.
        prompt: String,
    },

    /// A malformed edit request.
    #[error("invalid request {id}: {reason}")]
    InvalidRequest {
        /// Request id.
        id: String,
        /// Why it was rejected.
        reason: String,
    },

    /// A binary or text file did not match its expected format.
    #[error("malformed {what}: {detail}")]
    Format {
        /// Which file format.
        what: &'static str,
        /// What was wrong.
        detail: String,
    },

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// File involved.
        path: PathBuf,
        /// Source error.
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
