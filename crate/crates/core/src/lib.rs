//! Nested spatio-temporal forecasting.
//!
//! Node series are grouped into regions by spectral clustering; a cross-scale
//! attention forecaster predicts the next node patch while being guided by a
//! forecast of the next region-level patch, and rolls forward
//! autoregressively over long horizons.

pub mod error;
pub mod numcore;

pub use error::{NestError, Result};
pub mod binio;
pub mod datakit;
pub mod regionalize;
pub mod nestmodel;
pub mod snrcheck;
pub mod trainer;
pub mod evalbench;
pub mod rollout;
pub mod pipeline;
