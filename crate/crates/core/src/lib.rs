//! Hybrid-granularity post-training pruning for small decoder transformers.
//!
//! Layers are removed by input/output redundancy, input neurons of each
//! dense are ranked by how little their removal perturbs the condition
//! number of a regularized normal matrix, and the surviving inputs are
//! rescaled by a least-squares tuned mask.

pub mod importance;
pub mod linalg;
pub mod masktune;
pub mod model;
pub mod scheduler;

use thiserror::Error;

pub use linalg::{LinalgError, Matrix, Vector};
pub use model::{DenseKind, DenseLayer, Model, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("infeasible prune budget: {0}")]
    Infeasible(String),
    #[error("invalid prune config: {0}")]
    Config(String),
    #[error("solver failure in {dense}: {source}")]
    Solver {
        dense: String,
        #[source]
        source: LinalgError,
    },
    #[error("degenerate trace: {0}")]
    DegenerateTrace(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
