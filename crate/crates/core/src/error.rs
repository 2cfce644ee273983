use thiserror::Error;

use crate::event::SiteId;

/// Errors surfaced by the library. Budget exhaustion is *not* an error: it is
/// reported through per-epoch report statuses.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("site {0} is not registered on this request")]
    SiteNotRegistered(SiteId),

    #[error("invalid workload parameters: {0}")]
    InvalidParams(String),

    #[error("invalid quota configuration: {0}")]
    InvalidConfig(String),

    #[error("event store is empty")]
    EmptyStore,

    #[error("attribution object already exists for report {0}")]
    DuplicateObject(String),

    #[error("no attribution object for report {0}")]
    UnknownObject(String),

    #[error("histogram dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("insufficient tail mass: {hits} hits (need at least {needed}); raise the trial count")]
    InsufficientTailMass { hits: u64, needed: u64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
