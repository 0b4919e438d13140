use thiserror::Error;

use crate::mesh::Cube;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric: |m[{row}][{col}] - m[{col}][{row}]| = {defect:e}")]
    NotSymmetric { row: usize, col: usize, defect: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("near-singular matrix: smallest eigenvalue {min_eig:e} is below the floor {floor:e}")]
    NearSingular { min_eig: f64, floor: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix dimension {0} is outside 1..=8")]
    UnsupportedMatrixDim(usize),

    #[error("spatial dimension {0} is not supported here")]
    UnsupportedSpatialDim(usize),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("cube escapes the root cube")]
    CubeOutsideRoot,

    #[error("cube {0:?} does not meet the root cube")]
    EmptyCube(Cube),

    #[error("weight is not positive at cell {cell}: {value}")]
    NonPositiveWeight { cell: usize, value: f64 },

    #[error("non-finite value at cell {0}")]
    NonFinite(usize),

    #[error("norm average is degenerate on cube {cube:?} in direction {direction:?}")]
    DegenerateNorm { cube: Cube, direction: Vec<f64> },

    #[error("sparse family was built from a different weight")]
    FamilyWeightMismatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed field file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
