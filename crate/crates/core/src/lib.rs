//! Forecasting toolkit for lot ownership and permitting in master-planned
//! communities.
//!
//! Unpermitted lots are split into four owner categories (Flippers,
//! Builders, Prospects, Adjacents) that trade lots among themselves; Builders
//! and Prospects also permit lots, which moves them into the absorbing
//! `Permits` state. The yearly evolution is a time-varying Markov chain
//! `x_{t+1} = x_t · P_t`.
//!
//! - [`model`]: state space, transition matrices and the one-year update.
//! - [`ingestion`]: transaction CSV parsing, owner categorization, yearly tallies.
//! - [`estimation`]: constrained least-squares fitting of yearly matrices.
//! - [`forecast`]: exponential smoothing, stochastic forecasting, Monte Carlo bands.
//! - [`bayes`]: time-to-permit distributions and posterior expected permits.
//! - [`regime`]: CUSUM, k-means, Gaussian mixtures and information criteria.
//! - [`stats`]: correlation, regression with slope intervals, error metrics.
//! - [`synth`]: synthetic markets with known ground truth.

#![allow(clippy::needless_range_loop)]

pub mod bayes;
pub mod estimation;
pub mod exec;
pub mod forecast;
pub mod ingestion;
pub mod model;
pub mod regime;
pub mod stats;
pub mod synth;

pub use exec::Execution;
pub use model::{
    annual_permits, buildout_pct, step, ModelError, OwnerCategory, StateVector, Transition, TransitionMatrix,
    FREE_PARAMETERS, N_FREE, N_STATES,
};
