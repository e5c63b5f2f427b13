use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degree overflow: degree {degree} exceeds the admissible bound {bound}")]
    DegreeOverflow { degree: u32, bound: u32 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e} > {threshold:.3e})")]
    NotSymmetric { asymmetry: f64, threshold: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("relaxation degree {k} is below the problem degree {required}")]
    RelaxationDegreeTooLow { k: u32, required: u32 },

    #[error("A*W = B residual {residual:.3e} exceeds tolerance {threshold:.3e}")]
    ResidualTooLarge { residual: f64, threshold: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
