//! Wildfire susceptibility modelling toolkit.
//!
//! The crate covers the whole pipeline from a tabular presence/absence
//! dataset to district-level risk tables:
//!
//! - [`data`]: feature schema, samples, CSV ingestion and balanced absence sampling.
//! - [`forest`]: Gini CART trees with per-node cover, bagged into a random forest.
//! - [`shap`]: exact Shapley explanations (brute-force oracle and polynomial TreeSHAP).
//! - [`metrics`]: confusion metrics, ROC/PR curves, Brier score, reliability bins,
//!   top-k capture and stratified bootstrap intervals.
//! - [`validation`]: spatial-transfer and temporal-split evaluation with
//!   mean ± SD curve aggregation.
//! - [`geodata`]: ASCII grid rasters, wall-to-wall prediction, risk zonation,
//!   district area tables and a seeded synthetic landscape generator.
//! - [`cli`]: the `firerisk` command-line front end.

pub mod cli;
pub mod data;
pub mod forest;
pub mod geodata;
pub mod metrics;
pub mod seed;
pub mod shap;
pub mod validation;

mod error;

pub use error::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;
