//! Joint distribution function of the diagonal of a non-central Wishart
//! matrix: the p-variate non-central gamma / chi-square family.
//!
//! Two independent computational routes are provided and cross-validated:
//!
//! * [`onefactor`]: series and low-dimensional integral representations that
//!   apply when the correlation matrix has a one-factor structure
//!   `R = W^-2 + a a^T` with diagonal `W`.
//! * [`contour`]: angular (contour) integral representations on a polydisc,
//!   valid for arbitrary non-singular covariance, including the Hermitian
//!   (complex Wishart) case.
//!
//! [`mc`] carries a seeded Monte Carlo sampler of the exact defining law and a
//! Laplace-transform checker; both serve as model-independent validators.

pub mod contour;
pub mod error;
pub mod matrix;
pub mod onefactor;
pub mod quad;
pub mod special;

pub use error::{Error, Result};
