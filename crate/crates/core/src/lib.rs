//! Technical-debt text classification: dataset preparation, metrics,
//! pluggable model backends, training with early stopping and
//! cross-validation, two-stage ensemble inference and emissions tracking.

pub mod backend;
pub mod corpus;
pub mod dataset;
pub mod emissions;
pub mod ensemble;
mod error;
pub mod metrics;
pub mod registry;
pub mod trainer;

pub use error::{Error, Result};
