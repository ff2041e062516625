//! Moment-based identification of grade-of-membership models.
//!
//! The pipeline runs from categorical records to ℓ-moment estimates, a
//! partially known moment matrix, its low-rank completion, a basis of the
//! latent support, and finally conditional expectations and variances of
//! the latent membership vector given observed outcomes. Every stage is
//! generic over [`Scalar`], so the same code runs in exact rational
//! arithmetic and in `f64`.

pub mod conditional;
pub mod error;
pub mod estimator;
pub mod indexing;
pub mod io;
pub mod linalg;
pub mod moment_matrix;
pub mod oracle;
pub mod scalar;
pub mod tables;
pub mod verify;

pub use error::{GomError, Result};
pub use indexing::{CellIndex, PowerIndex, Scheme};
pub use scalar::{Arithmetic, Rational, Scalar};
