use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the service can report. Variants map one-to-one onto the
/// error codes carried in wire responses (see [`Error::code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("platform key unavailable: {0}")]
    Key(String),
    #[error("sealed blob is bound to a different measurement")]
    SealViolation,
    #[error("authentication tag mismatch: {0}")]
    Integrity(String),
    #[error("merkle verification failed: {0}")]
    Tamper(String),
    #[error("rollback detected: sealed counter {sealed} behind monotonic counter {current}")]
    Rollback { sealed: u64, current: u64 },
    #[error("durable write failed: {0}")]
    DurableWrite(#[source] io::Error),
    #[error("unit {0} has been shredded")]
    Shredded(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("epoch {requested} is ahead of current epoch {current}")]
    Epoch { requested: u64, current: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("denied by policy: {0}")]
    Denied(String),
    #[error("attestation violation: {0}")]
    AttestationViolation(String),
    #[error("anchor error: {0}")]
    Anchor(String),
    #[error("update queue above high-water mark; retry after {retry_after_ms} ms")]
    Backpressure { retry_after_ms: u64 },
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("upstream completion failed: {0}")]
    Upstream(String),
    #[error("migration failed: {0}")]
    Migration(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Key(_) => "key-error",
            Error::SealViolation => "seal-violation",
            Error::Integrity(_) => "integrity",
            Error::Tamper(_) => "tamper",
            Error::Rollback { .. } => "rollback",
            Error::DurableWrite(_) => "durable-write",
            Error::Shredded(_) => "shredded",
            Error::NotFound(_) => "not-found",
            Error::Epoch { .. } => "epoch",
            Error::Protocol(_) => "protocol",
            Error::Domain(_) => "domain",
            Error::Shape { .. } => "shape",
            Error::Denied(_) => "denied",
            Error::AttestationViolation(_) => "attestation-violation",
            Error::Anchor(_) => "anchor",
            Error::Backpressure { .. } => "retry-after",
            Error::Config { .. } => "config",
            Error::Upstream(_) => "upstream",
            Error::Migration(_) => "migration",
            Error::InvalidInput(_) => "invalid-input",
            Error::Io(_) => "io",
            Error::Json(_) => "protocol",
        }
    }
}
