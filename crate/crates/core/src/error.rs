use std::path::PathBuf;

use thiserror::Error;

/// Cache level named in planner and simulator errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CacheLevel {
    L1,
    L2,
    L3,
}

impl std::fmt::Display for CacheLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CacheLevel::L1 => f.write_str("L1"),
            CacheLevel::L2 => f.write_str("L2"),
            CacheLevel::L3 => f.write_str("L3"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid convolution shape: field `{field}` {reason}")]
    InvalidShape { field: &'static str, reason: String },

    #[error("invalid machine spec: field `{field}` {reason}")]
    InvalidMachine { field: &'static str, reason: String },

    /// Even a single-channel tile set does not fit the usable L1 budget.
    #[error("unplannable in L1: smallest tile set needs {needed} bytes, budget is {budget}")]
    UnplannableL1 { needed: u64, budget: u64 },

    #[error("unplannable in L2: K2=1 needs {needed} bytes, budget is {budget}")]
    UnplannableL2 { needed: u64, budget: u64 },

    #[error("unplannable in L3: K3=1 needs {needed} bytes, budget is {budget}")]
    UnplannableL3 { needed: u64, budget: u64 },

    #[error("{}: record {}: {message}", path.display(), record.map_or("-".to_string(), |r| r.to_string()))]
    Parse {
        path: PathBuf,
        record: Option<usize>,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("tile coordinates out of range: {0}")]
    TileOutOfRange(String),

    #[error("vector-based packing requires unit stride, got {stride_h}x{stride_w}")]
    NonUnitStride { stride_h: usize, stride_w: usize },

    #[error("strategy does not match shape/machine: {0}")]
    StrategyMismatch(String),

    #[error("{kind} tile of {bytes} bytes exceeds {level} capacity of {capacity} bytes")]
    TileTooLarge {
        kind: &'static str,
        level: CacheLevel,
        bytes: u64,
        capacity: u64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
