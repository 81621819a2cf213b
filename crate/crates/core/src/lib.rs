#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons reject NaN on purpose

//! Representer-method variational data assimilation for a one-dimensional
//! advection model, with automatic selection of the model-error covariance.

pub mod covariance;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod observation;
pub mod optimize;
pub mod oracle;
pub mod param_select;
pub mod representer;
pub mod rng;
pub mod transport;

pub use error::{Error, Result};
