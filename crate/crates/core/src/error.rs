//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("unsupported structure: {0}")]
    UnsupportedStructure(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("extrapolation: {0}")]
    Extrapolation(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("rank deficiency: {0}")]
    RankDeficient(String),
    #[error("no overlap: {0}")]
    Overlap(String),
    #[error("regularization failure: {0}")]
    Regularization(String),
    #[error("non-Gaussianity insufficient: {0}")]
    NonGaussianity(String),
    #[error("input error: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, Error>;
