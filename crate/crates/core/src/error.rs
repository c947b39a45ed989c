//! Crate-wide error type.

use std::fmt;
use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the measurement pipeline.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration or argument; measurement never started.
    InvalidInput(String),
    /// Host topology cannot satisfy the request (missing node, too few
    /// sockets, unpinnable CPU).
    Topology(String),
    /// Thread-affinity or memory-binding syscall failure.
    Binding(String),
    /// Performance counters unavailable or rejected by the OS. Carries a
    /// remediation hint where one is known.
    Counters(String),
    /// Executable-memory allocation or code emission failure.
    Codegen(String),
    /// The scripted mock backend ran out of entries or was mis-shaped.
    MockScript(String),
    /// Underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Topology(msg) => write!(f, "topology: {msg}"),
            Error::Binding(msg) => write!(f, "binding: {msg}"),
            Error::Counters(msg) => write!(f, "counters: {msg}"),
            Error::Codegen(msg) => write!(f, "codegen: {msg}"),
            Error::MockScript(msg) => write!(f, "mock script: {msg}"),
            Error::Io(err) => write!(f, "i/o: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::InvalidInput(format!("json: {err}"))
    }
}
