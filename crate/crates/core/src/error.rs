use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("zero within-class variance for feature(s): {}", .0.join(", "))]
    DegenerateFeature(Vec<String>),
    #[error("nuisance matrix is rank deficient within class {class}")]
    RankDeficientNuisance { class: u8 },
    #[error("insufficient degrees of freedom: {0}")]
    InsufficientDf(String),
    #[error("correlation {0} is saturated (|r| >= 1 - 1e-12)")]
    SaturatedCorrelation(f64),
    #[error("bivariate covariance is singular (|r| = {0} >= 1)")]
    SingularInput(f64),
    #[error("no usable relabeling after {0} redraws")]
    DegeneratePermutation(usize),
    #[error("null pool is empty")]
    EmptyPool,
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("covariance block is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("cholesky factorization failed")]
    CholeskyFailure,
    #[error("unknown feature '{0}'")]
    UnknownFeature(String),
    #[error("feature '{0}' appears in both sets")]
    OverlappingSets(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than internal failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::CholeskyFailure)
    }
}
