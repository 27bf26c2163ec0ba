use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} is {}x{}, {rhs} is {}x{}", lhs_dims.0, lhs_dims.1, rhs_dims.0, rhs_dims.1)]
    ShapeMismatch { op: &'static str, lhs: String, lhs_dims: (usize, usize), rhs: String, rhs_dims: (usize, usize) },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("tile dimension `{0}` must be at least 1")]
    ZeroTile(&'static str),

    #[error("the fused variant requires a tile configuration")]
    MissingTile,

    #[error("inconsistent shard plan: {0}")]
    Plan(String),

    #[error("unknown executor label `{0}`")]
    UnknownExecutor(String),

    #[error("no qualified candidate to select from ({disqualified} disqualified)")]
    AllDisqualified { disqualified: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tuning cache {}: {message}", path.display())]
    CacheParse { path: PathBuf, message: String },

    #[error("tuning cache {} has format version {found}; this build reads version {supported}", path.display())]
    CacheVersion { path: PathBuf, found: u32, supported: u32 },

    #[error("workload needs about {required_bytes} bytes of matrix storage, limit is {limit_bytes}")]
    TooLarge { required_bytes: u64, limit_bytes: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
