use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence length {len} is not divisible by coarsening factor {cf}")]
    NotDivisible { len: usize, cf: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("protocol fault: {0}")]
    Protocol(#[from] ProtocolFault),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

/// Failure of the boundary-message protocol between worker lanes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolFault {
    #[error("worker {receiver} timed out waiting for a boundary message (sweep tag {tag})")]
    Stalled { receiver: usize, tag: u64 },

    #[error("worker {receiver} expected tag {expected} but received {received}")]
    UnexpectedTag {
        receiver: usize,
        expected: u64,
        received: u64,
    },

    #[error("duplicate boundary message on channel {channel} (tag {tag})")]
    Duplicate { channel: usize, tag: u64 },

    #[error("unsupported protocol version {0}")]
    Version(u8),

    #[error("worker lane {0} panicked")]
    WorkerPanic(usize),
}
