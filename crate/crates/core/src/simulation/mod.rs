//! Simulation studies: data-generating processes and the Monte Carlo driver.

pub mod dgp;
pub mod monte_carlo;

pub use dgp::{OutcomeModel, ResponseModel, Scenario};
pub use monte_carlo::{
    fit_method, replicates_to_csv, run_monte_carlo, study_one_methods, study_two_methods, summarize, MethodSpec, MetricsRow,
    MetricsTable, ReplicateRecord, SimConfig, SimOutput, Study,
};
