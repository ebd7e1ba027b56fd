//! A universal time-series forecaster.
//!
//! Contexts are drawn from a long-tail history sampling regime (HSR) over
//! past time steps, a least-squares fit of 437 sinusoids initialises the
//! basis coefficients, and a transformer backbone refines them. The output is
//! a closed-form function of time that can be evaluated at any horizon, in
//! the past or the future.
//!
//! Module map:
//! - [`data`]: series ingestion, time units, splits, sampling utility
//! - [`hsr`]: the history sampling distribution and weighted draws
//! - [`basis`]: frequency set, robust standardisation, coefficient fits, evaluation
//! - [`numerics`]: dense tensors with reverse-mode autodiff
//! - [`model`]: embedders, DAM layers, token merging, checkpoints
//! - [`train`]: loss, schedules, clipping, the training loop
//! - [`eval`]: forecasting metrics, HSR tuning, imputation, cost sweeps, ablations

pub mod basis;
pub mod data;
pub mod error;
pub mod eval;
pub mod hsr;
pub mod model;
pub mod numerics;
pub mod par;
pub mod stats;
pub mod svg;
pub mod train;

pub use error::{DamError, Result};
