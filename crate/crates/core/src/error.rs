use thiserror::Error;

use crate::nvm::CrashTag;

/// Errors raised by the ORAM controllers, the NVM model and the harness.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OramError {
    #[error("invalid address {addr} (capacity {capacity})")]
    InvalidAddress { addr: u64, capacity: u64 },

    #[error("dummy address cannot be accessed")]
    DummyAddress,

    #[error("path label {label} out of range for height {height}")]
    LabelOutOfRange { label: u32, height: u32 },

    #[error("index {index} out of range for region `{region}` ({units} units)")]
    IndexOutOfRange {
        region: String,
        index: usize,
        units: usize,
    },

    #[error("write of {got} bytes to region `{region}` with unit size {expected}")]
    WrongLength {
        region: String,
        expected: usize,
        got: usize,
    },

    #[error("stash overflow: {occupancy} blocks exceed capacity {capacity}")]
    StashOverflow { occupancy: usize, capacity: usize },

    #[error("temporary posmap overflow: capacity {capacity}")]
    TempPosMapOverflow { capacity: usize },

    #[error("write pending queue `{queue}` overflow: capacity {capacity}")]
    WpqOverflow { queue: &'static str, capacity: usize },

    #[error("write pending queue `{queue}` protocol violation: {what}")]
    WpqProtocol { queue: &'static str, what: &'static str },

    #[error("backup block for address {addr} could not be placed on path {label}")]
    BackupUnplaced { addr: u64, label: u32 },

    #[error("no valid copy of address {addr} at level {level} on path {label}")]
    MissingCopy { level: usize, addr: u64, label: u32 },

    #[error("crash injected at event {event} ({tag:?})")]
    Crashed { event: u64, tag: CrashTag },

    #[error("corrupt image: {0}")]
    CorruptImage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("statistics: {0}")]
    Statistics(String),
}

pub type Result<T, E = OramError> = std::result::Result<T, E>;
