//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("axis {axis} out of range for tensor of rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("TT rank chain mismatch at core {core}: left rank {left} != previous right rank {right}")]
    RankChain { core: usize, left: usize, right: usize },
    #[error("invalid TT structure: {0}")]
    InvalidTt(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("gate index {index} out of range for {gates} gates")]
    GateIndex { index: usize, gates: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("zero-norm embedding at row {0}: cosine similarity undefined")]
    ZeroNormEmbedding(usize),
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data format error: {0}")]
    Format(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("dense reconstruction of a TT matrix is forbidden in this scope")]
    ReconstructionForbidden,
    #[error("separation {sep} infeasible for {speakers} speakers in {dim} dimensions")]
    InfeasibleSeparation {
        sep: f64,
        speakers: usize,
        dim: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
