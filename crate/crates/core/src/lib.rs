//! Estimators of the expected information gain of a Bayesian experiment.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dlmc;
pub mod error;
pub mod forward_models;
pub mod laplace;
pub mod mldlmc;
pub mod mldlsc;
pub mod rng;
pub mod sparse_grid;
pub mod stats;

pub use dlmc::{EstimatorResult, LevelSummary};
pub use error::{Error, Result};
pub use forward_models::{Experiment, ForwardModel, MeshHierarchy, NoiseSpec, PriorSpec};
pub use mldlmc::{MldlmcConfig, PilotEstimates};
pub use mldlsc::MldlscConfig;
