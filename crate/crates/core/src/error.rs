use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("sequence too long: {len} tokens exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("special token id {id} inside segment at index {index}")]
    SpecialInSegment { id: u32, index: usize },

    #[error("malformed UTF-8 in {path} at byte offset {offset}")]
    Utf8 { path: PathBuf, offset: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error("inconsistent instance: {0}")]
    Inconsistent(String),

    #[error("factorization step {step} out of range (order has {steps} steps)")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("{table} id {id} out of range (size {size})")]
    IdOutOfRange {
        table: &'static str,
        id: usize,
        size: usize,
    },

    #[error("no attendable key for row {row}")]
    NoAttendableKey { row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward called without a recorded forward pass")]
    NoTape,

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("label {label} out of range ({count} labels)")]
    LabelOutOfRange { label: usize, count: usize },

    #[error("data: {0}")]
    Data(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
