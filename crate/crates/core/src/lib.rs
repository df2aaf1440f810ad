//! Deterministic federated-learning simulator for model-soup merging.
//!
//! A server keeps `d` global models and an `m × d` weight matrix. Each
//! client trains the weighted combination of the global models and the
//! server pushes the resulting update back into both the models and the
//! weights. The crate also ships comparison methods, a synthetic data
//! generator, gradient and descent checks, and an experiment harness.

pub mod analysis;
pub mod baselines;
pub mod convergence;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fedmerge;
pub mod gradcheck;
pub mod model;
pub mod param;
pub mod report;
pub mod schedule;
pub mod sim;

pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentConfig, Method};
pub use fedmerge::{FedMergeServer, MergeWeights, ModelSoup, ServerConfig, WeightMode};
pub use model::{Batch, LocalConfig, ModelSpec};
pub use param::{LayerLayout, ParamVector, SeededRng};
pub use data::{ClientDataset, Split};
pub use report::{RoundReport, RoundStats};
pub use sim::{simulate, Algorithm, Trajectory};
