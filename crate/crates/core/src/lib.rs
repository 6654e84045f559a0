//! Identification and estimation for triangular binary-outcome systems.

pub mod deconv_twofactor;
pub mod dgp_oracle;
pub mod dist;
pub mod error;
pub mod identification_analyzer;
pub mod kernel_np;
pub mod mc_harness;
pub mod quadrature;
pub mod rank_estimator;
pub mod report;
pub mod rng;
pub mod stats;
pub mod wls_series_estimator;

pub use error::{Error, Result};
