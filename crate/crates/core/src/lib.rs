//! Bayesian deep operator networks for PDE solution and parameter estimation.
//!
//! A branch network maps space-time coordinates to a latent representation of
//! the forward solution; a trunk network maps standard-normal latent draws to a
//! multiplicative modulation of that representation and to samples of the
//! unknown physical parameters. Training minimizes a weighted physics-informed
//! variational loss, and the spread induced by the latent draws provides
//! epistemic uncertainty while a log-variance head provides aleatoric
//! uncertainty.
//!
//! Module map:
//!
//! - [`autodiff`]: scalar reverse-mode tape and second-order directional jets.
//! - [`network`]: dense layers, MLPs, the operator-network composition, the
//!   batched jet kernel used in training and the model file format.
//! - [`variational`]: priors, KL divergence, loss assembly and prediction with
//!   uncertainty.
//! - [`problems`]: the benchmark problems, samplers and datasets.
//! - [`training`]: Adam, plateau scheduling, the training loop, grid search.
//! - [`baselines`]: SNN, BNN, MC-dropout and deep-ensemble comparison models.
//! - [`analysis`]: posterior summaries, coverage, field grids, replication.
//! - [`config`], [`experiments`], [`io`] and [`cli`]: configuration, run
//!   orchestration and run directories.
//! - [`report`]: summary tables over run directories.
//! - [`gradcheck`]: the finite-difference verification suite.

pub mod analysis;
pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod io;
pub mod network;
pub mod problems;
pub mod report;
pub mod rng;
pub mod training;
pub mod variational;

pub use error::{Error, Result};
