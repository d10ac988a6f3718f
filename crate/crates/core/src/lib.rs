//! Adversarial imitation learning for microscopic vehicle trajectories.
//!
//! The crate is organized around a small reverse-mode differentiation core
//! ([`diffcore`]), recurrent mixture-density networks ([`nets`]), a
//! deterministic context-aware driving environment ([`env`]), trajectory
//! ingestion and synthetic car-following experts ([`data`]), the adversarial
//! trainer ([`gail`]) and two-sample distribution metrics ([`metrics`]).
//!
//! With the default `parallel` feature, rollout collection and the metric
//! kernels fan out over rayon; results are identical to the sequential
//! fallback (`--no-default-features`) because work is merged in index order.

pub mod data;
pub mod diffcore;
pub mod env;
pub mod gail;
pub mod metrics;
pub mod nets;

pub(crate) mod par;

use thiserror::Error;

/// Top-level error, tagging each failure with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("diffcore: {0}")]
    Diff(#[from] diffcore::DiffError),
    #[error("env: {0}")]
    Env(#[from] env::EnvError),
    #[error("data: {0}")]
    Data(#[from] data::DataError),
    #[error("gail: {0}")]
    Train(#[from] gail::TrainError),
    #[error("metrics: {0}")]
    Metric(#[from] metrics::MetricError),
}
