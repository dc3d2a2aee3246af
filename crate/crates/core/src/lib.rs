//! DeMa: a dual-path, delay-aware state-space backbone for multivariate
//! time series.
//!
//! The forward pass runs an adaptive Fourier split of the lookback window,
//! tokenises both components into patches, and stacks blocks that pair a
//! per-variate selective SSM (temporal path) with a delay-aware linear
//! attention across variates (variate path). Task heads turn the
//! aggregated representation into forecasts, reconstructions or class
//! probabilities.

pub mod dala;
pub mod delay;
pub mod embedding;
pub mod error;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod series;
pub mod spectral;
pub mod ssd;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{DemaError, Result};
pub use series::SeriesWindow;
