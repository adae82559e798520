//! Covariate selection and low-dimensional balancing scores.

pub mod kernel_sdr;
pub mod scad;

pub use kernel_sdr::{kernel_sdr, sdr_objective, SdrOptions, SdrProjection};
pub use scad::{penalized_select, scad_penalty_deriv, two_stage_sps, ScadOptions, SelectionResult, TwoStageResult};
