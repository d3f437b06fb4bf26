//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A required column is missing from an input file or layout.
    #[error("schema error: missing column `{column}`")]
    Schema { column: String },

    /// Structural validation of a dataset failed.
    #[error("validation error: {message}")]
    Validation { message: String },

    /// A cell could not be parsed (non-numeric or non-finite).
    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },

    /// Too few observations for the requested computation.
    #[error("insufficient sample: {message}")]
    InsufficientSample { message: String },

    /// Residual degrees of freedom are non-positive.
    #[error("degrees-of-freedom error: {observations} observations for {parameters} parameters")]
    DegreesOfFreedom {
        observations: usize,
        parameters: usize,
    },

    /// The requested covariance structure cannot be estimated from the data.
    #[error("covariance structure error: {message}")]
    Structure { message: String },

    /// The reduced moment basis cannot identify the coefficients.
    #[error("identifiability error: {message}")]
    Identifiability { message: String },

    /// Fewer subjects than retained moment functions.
    #[error("sample-size error: {subjects} subjects for a basis of dimension {basis_dim}")]
    SampleSize { subjects: usize, basis_dim: usize },

    /// Matrix dimensions do not line up.
    #[error("dimension mismatch: {message}")]
    Dimension { message: String },

    /// A linear system was singular or a factorization failed.
    #[error("numerical error: {message}")]
    Numerical { message: String },

    /// Zero is not in the convex hull of the moment functions at the
    /// starting point, so no estimate can be produced.
    #[error("convex-hull failure: {message}")]
    HullFailure { message: String },

    /// All replications of a simulation study failed.
    #[error("study error: {message}")]
    Study { message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(message: impl Into<String>) -> Self {
        Error::Validation {
            message: message.into(),
        }
    }

    pub(crate) fn dimension(message: impl Into<String>) -> Self {
        Error::Dimension {
            message: message.into(),
        }
    }

    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical {
            message: message.into(),
        }
    }
}
