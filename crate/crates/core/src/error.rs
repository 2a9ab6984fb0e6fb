use alloc::string::String;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("matrix has numerical rank {rank}, expected {expected}")]
    RankDeficient { rank: usize, expected: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("design matrix is ill-conditioned (condition number {condition:e})")]
    IllConditioned { condition: f64 },
    #[error("response is constant; no ridge direction can be identified")]
    Degenerate,
    #[error("invalid number of retained components k={k} for N={n}")]
    InvalidK { k: usize, n: usize },
    #[error("compression supports one-dimensional ridge directions only (got r={r})")]
    UnsupportedRank { r: usize },
    #[error("neighbor {neighbor} of missing node {node} is not available")]
    MissingNeighbor { node: usize, neighbor: usize },
    #[error("sample variance is zero")]
    ZeroVariance,
    #[error("{failed} of {total} nodal fits failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = core::result::Result<T, Error>;
