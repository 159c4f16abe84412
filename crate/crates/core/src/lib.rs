//! Bi-level attention ensembles for adapting several frozen source models to an unlabeled
//! target domain.
//!
//! All math is generic over [`Scalar`] (`f32` or `f64`). Training and gradient checks run in
//! `f64`; the aliases below fix that choice for the common entry points.

pub mod aten;
pub mod bank;
pub mod error;
pub mod grad;
pub mod heads;
pub mod numerics;
pub mod objectives;
pub mod pseudo;
pub mod report;
pub mod scalar;
pub mod synth;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;

pub type Matrix64 = numerics::Matrix<f64>;
pub type SourceHead64 = heads::SourceHeadParams<f64>;
pub type BiAtenParams64 = aten::BiAtenParams<f64>;
pub type ForwardTrace64 = aten::ForwardTrace<f64>;
