//! Bayesian angles-only orbit determination for cislunar objects.
//!
//! The crate implements a hybrid particle Gaussian mixture filter: the first
//! few measurement updates sample each mixture component's posterior with
//! Metropolis MCMC (starting from a uniform prior over the whole cislunar
//! volume), after which the filter switches to cheaper per-component ensemble
//! Kalman updates.
//!
//! Module map:
//!
//! - [`dynamics`]: CR3BP equations of motion, adaptive Runge-Kutta propagation
//!   and the synodic/topocentric frame chain.
//! - [`observation`]: azimuth/elevation measurement model and likelihoods.
//! - [`gmm`]: Gaussian mixtures, particle ensembles, clustering and entropy.
//! - [`pgm_core`]: ensemble propagation, weight update and resampling.
//! - [`pgm1`]: ensemble Kalman component updates.
//! - [`pgm2`]: MCMC component updates and harmonic-mean likelihoods.
//! - [`hybrid`]: the switching driver and per-step track records.
//! - [`scenario`]: 9:2 NRHO truth and observation scheduling.
//! - [`harness`]: configuration, run orchestration and output files.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod hybrid;
pub mod linalg;
pub mod observation;
pub mod par;
pub mod pgm1;
pub mod pgm2;
pub mod pgm_core;
pub mod scenario;

pub use error::{Error, Result};

/// 6-D state vector (position then velocity).
pub type Vec6 = nalgebra::SVector<f64, 6>;
/// 6x6 covariance matrix.
pub type Mat6 = nalgebra::SMatrix<f64, 6, 6>;
