use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the metadata channel library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid channel config: {0}")]
    InvalidConfig(String),

    #[error("address {addr:#x} is not aligned to {align:#x}")]
    Misaligned { addr: u64, align: u64 },

    #[error("address {addr:#x} is outside the mailbox window at {base:#x}")]
    NotInMailbox { addr: u64, base: u64 },

    #[error("payload too large: {0}")]
    PayloadTooLarge(String),

    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("conflicting payloads for chunk type {msg_type} seq {seq}: {first:#x} vs {second:#x}")]
    Ambiguous {
        msg_type: u32,
        seq: u32,
        first: u32,
        second: u32,
    },

    #[error("mailbox allocation failed: {0}")]
    Allocation(String),

    #[error("request ordering violated: {0}")]
    Ordering(String),

    #[error("invalid channel parameters: {0}")]
    InvalidParams(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
