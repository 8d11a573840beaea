use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid config `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("unsatisfiable: {0}")]
    Unsatisfiable(String),

    #[error("row index {row} out of range (num_rows = {num_rows})")]
    RowOutOfRange { row: u64, num_rows: u64 },

    #[error(
        "row {row} is unbinnable: observed retention {observed_ms} ms is below the base refresh interval {base_ms} ms"
    )]
    UnbinnableRow { row: u64, observed_ms: f64, base_ms: f64 },

    #[error("VRT stepped out of order: expected window {expected}, got {got}")]
    OutOfOrderStep { expected: u64, got: u64 },

    #[error("checkpoint version mismatch: blob has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),
}

impl Error {
    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}
