use std::time::Duration;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the store, the compaction engine, and the device protocol.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// On-disk data failed a checksum, magic, or structural check.
    #[error("corruption: {0}")]
    Corruption(String),

    /// A caller violated an operation precondition (e.g. unsorted merge input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A version edit would break level invariants.
    #[error("invalid version edit: {0}")]
    InvalidEdit(String),

    /// Host and device compaction outputs could not be combined.
    #[error("integration: {0}")]
    Integration(String),

    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),

    /// The device reported a compaction failure.
    #[error("device error {code}: {message}")]
    Device { code: u32, message: String },

    #[error("device did not reply within {0:?}")]
    DeviceTimeout(Duration),

    /// The device session transport is broken; the store degrades to baseline.
    #[error("device session lost")]
    SessionLost,

    #[error("config: {0}")]
    Config(String),
}

/// Wire-level decode failures, split by cause so callers can react differently:
/// an incomplete frame means "wait for more bytes", the others mean the stream
/// is unusable.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("incomplete frame: need {needed} more bytes")]
    Incomplete { needed: usize },

    #[error("frame crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("frame length {0} exceeds limit")]
    Oversize(usize),
}

impl Error {
    pub fn corruption(msg: impl Into<String>) -> Self {
        Error::Corruption(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
