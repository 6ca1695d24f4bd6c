//! Periodic motif memory (PaMM): hashed pair/triplet lookup over discretized
//! local geometry, fused into the edge features of a small invariant
//! message-passing energy/force model, together with the synthetic data,
//! control variants, and training harness used to exercise it.

pub mod graph;
pub mod motif;
pub mod util;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    /// Invalid configuration or invalid use of an API (CLI exit code 2).
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or inconsistent data: structures, datasets, checkpoints
    /// (CLI exit code 3).
    #[error("data error: {0}")]
    Data(String),
    /// Numerical failure: NaN/Inf in activations, divergence (CLI exit code 4).
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
pub mod tape;
pub mod fusion;
pub mod variant;
pub mod config;
pub mod model;
pub mod data;
pub mod train;
pub mod analysis;
