use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("feature vector contains a non-finite value")]
    InvalidFeature,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimError { expected: usize, found: usize },

    #[error("tracklet has an empty feature history")]
    EmptyTracklet,

    #[error("matching problem has an empty side ({n_d} detections, {n_t} tracklets)")]
    EmptyProblem { n_d: usize, n_t: usize },

    #[error("QP constraints are contradictory")]
    Infeasible,

    #[error("QP solver stopped after {iterations} iterations without converging")]
    MaxIter { iterations: usize },

    #[error("component {component} has {size} vertices, above the enumeration limit {limit}")]
    ComponentTooLarge {
        component: usize,
        size: usize,
        limit: usize,
    },

    #[error("brute-force oracle limited to {limit} vertices, got {size}")]
    OracleTooLarge { size: usize, limit: usize },

    #[error("backward pass requires an optimal forward solve")]
    NotOptimal,

    #[error("linear system is singular")]
    Singular,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
