//! Two-stage 2D channel extrapolation for TDD massive MIMO-OFDM.
//!
//! A sounding reference signal hops across bandwidth parts, so each uplink
//! slot observes only a comb of subcarriers inside one sub-band. This crate
//! simulates that regime and recovers the full-band, full-array channel from
//! it in two stages:
//!
//! 1. [`hrpe`]: high-resolution parameter estimation. Per-slot observations
//!    are phase-compensated, spliced into one wide-band frame, and a
//!    robustified two-stage spatial-temporal MUSIC with successive
//!    interference cancellation alternates with maximum-likelihood updates of
//!    the gains and the per-slot imperfections (random phase, timing offset,
//!    Doppler increments).
//! 2. [`tracker`]: slot-by-slot tracking. The delay/angle-gridded channel
//!    follows a Bernoulli-Gaussian prior with Markov support, amplitude and
//!    Doppler dynamics; an expectation step runs a turbo-style message
//!    passing between a LMMSE estimator and the sparsity combiner, and a
//!    maximization step updates imperfections and off-grid corrections.
//!
//! [`scenario`] generates ground truth and observations, [`subspace`] holds
//! the MUSIC building blocks, and [`metrics`], [`baselines`] and
//! [`experiment`] form the benchmark harness around the two stages.

pub mod baselines;
pub mod experiment;
pub mod hrpe;
pub mod metrics;
pub mod rng;
pub mod scenario;
pub mod subspace;
pub mod tracker;

/// Dense complex matrix used throughout the crate.
pub type CMat = nalgebra::DMatrix<num_complex::Complex64>;
/// Dense complex column vector used throughout the crate.
pub type CVec = nalgebra::DVector<num_complex::Complex64>;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration field is inconsistent (dimensions, divisibility, ranges).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// The Zadoff-Chu root is not coprime with, or out of range for, the sequence length.
    #[error("invalid Zadoff-Chu root {root} for prime length {len}")]
    InvalidZcRoot { root: u32, len: usize },
    /// The path sampler could not satisfy the minimum delay spacing.
    #[error("minimum path spacing unsatisfiable after {attempts} attempts")]
    PathSpacing { attempts: usize },
    /// Model-order selection found no signal component.
    #[error("no detectable paths in the observation")]
    NoDetectablePaths,
    /// Requested subspace dimension does not leave room for a noise subspace.
    #[error("model order {order} too large for dimension {dim}")]
    ModelOrderTooLarge { order: usize, dim: usize },
    /// The reference path's gain vanished, so relative imperfections are undefined.
    #[error("reference path gain vanished; cannot anchor imperfection estimates")]
    ReferencePathVanished,
    /// A numeric routine failed to converge or produced a degenerate factorization.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
