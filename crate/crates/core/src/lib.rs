//! Desk-scale federated-learning simulator built around Bayesian model
//! compression with a clustered-sparsity prior.
//!
//! The server maintains a mean-field variational posterior over network
//! weights, their precisions, and binary supports. Supports are coupled
//! through a grid Markov random field so that surviving weights gather in
//! rectangular clusters, which a block codec can ship in far fewer bits
//! than element-wise encodings. Simulated clients run reparameterized SGD
//! on their local shards; the server closes the loop with closed-form
//! posterior updates and sum-product message passing.
//!
//! Entry points: [`config::ExperimentConfig`] + [`sim::run_experiment`]
//! for full runs, or the individual modules for the underlying pieces.

pub mod baselines;
pub mod codec;
pub mod config;
pub mod data;
pub mod grid;
pub mod net;
pub mod prior;
pub mod results;
pub mod rng;
pub mod server;
pub mod sim;
pub mod special;
pub mod synthetic;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid prior configuration: {}", .0.join("; "))]
    Prior(Vec<String>),

    #[error("grid error: {0}")]
    Grid(String),

    #[error("configuration error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("simulation error: {0}")]
    Sim(String),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
