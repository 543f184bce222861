use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A series failed to meet its tail bound within the iteration cap.
    #[error("series did not converge: {0}")]
    SeriesDivergence(String),

    /// A quadrature refinement loop stalled above the requested tolerance.
    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),

    /// The correlation matrix does not admit a one-factor representation.
    #[error("correlation matrix is not one-factor representable: {0}")]
    NotOneFactor(String),

    /// Sign pattern of the factor column cannot reproduce the correlations.
    #[error("inconsistent sign pattern in one-factor column: {0}")]
    InconsistentSigns(String),

    /// Requested contour radius does not separate the singularities.
    #[error("contour radius infeasible: {0}")]
    RadiusTooSmall(String),

    /// Angular weight exponent leaves the admissible beta domain (alpha <= 1/2).
    #[error("shape parameter out of range for the angular weight: {0}")]
    BetaDomain(String),

    /// Matrix is singular or fails a required definiteness property.
    #[error("matrix not admissible: {0}")]
    BadMatrix(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
