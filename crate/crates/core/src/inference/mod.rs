//! Variance estimation and the empirical-likelihood ratio test.

pub mod bootstrap;
pub mod empirical_likelihood;
pub mod linearized;

pub use bootstrap::{bootstrap_variance, bootstrap_with, replicate_rng, BootstrapResult};
pub use empirical_likelihood::{el_profile_loglik, el_ratio_test, ElMasses, ElOptions, ElTest};
pub use linearized::{influence_decomposition, linearized_variance, InfluenceDecomposition};
