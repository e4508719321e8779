use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("mass matrix is singular (|det| = {det:e})")]
    MassMatrixSingular { det: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParams(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("Riccati iteration did not produce a stabilizing solution")]
    NotStabilizable,
    #[error("matrix is not Hurwitz (spectral abscissa {abscissa:e})")]
    NotHurwitz { abscissa: f64 },
    #[error("backup set certification shrank the level below {0:e}")]
    EmptySet(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("a nonzero tightening was supplied to the plain CBF program")]
    BadCombination,
}
