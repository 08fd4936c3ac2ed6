//! Estimation of direct and spillover (indirect) causal effects under partial
//! interference, for counterfactual treatment-allocation policies whose unit
//! probabilities depend on covariates.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the immutable data types shared by everything else
//!   (clusters, populations, propensity parameters, estimate tables).
//! * [`allocation`] builds the covariate-dependent allocation policy: it solves
//!   the per-cluster intercepts and evaluates unit, vector, conditional and
//!   treated-neighbour-count probabilities.
//! * [`propensity`] is the random-intercept logistic cluster propensity score
//!   (adaptive Gauss-Hermite likelihood, scores, maximum likelihood fit).
//! * [`estimators`] contains the IPW estimators and the sandwich variance
//!   engine for known and estimated propensity scores.
//! * [`simulation`] generates synthetic worlds with exact truths and runs
//!   replication studies.
//! * [`clustering`] groups spatial units into interference clusters.

pub mod allocation;
pub mod clustering;
pub mod error;
pub mod estimators;
pub mod math;
pub mod model;
pub mod optim;
pub mod propensity;
pub mod quadrature;
pub mod simulation;

pub use allocation::{CounterfactualPolicy, PolicyProbabilities};
pub use error::{Error, Result};
pub use model::{
    validate_population, Cell, ClusterData, DiscreteAlphaDistribution, EstimateTable, Population,
    PropensityModel, PsMode, RawCluster,
};
pub use propensity::FittedPropensity;
