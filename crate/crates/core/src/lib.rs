//! Smoothed propensity-score estimation for data missing at random.

pub mod calibration;
pub mod data;
pub mod dimension_reduction;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod multivariate;
pub mod simulation;

pub use error::{Error, Result};
