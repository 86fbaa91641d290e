//! User-level differentially private training at desk scale.
//!
//! The crate is organised around five layers:
//!
//! * [`corpus`]: user-partitioned token data, unit statistics and the
//!   record-selection strategies used to bound each user's contribution.
//! * [`accountant`]: privacy-loss-distribution accounting for the Poisson
//!   subsampled Gaussian and the mixture-of-Gaussians group mechanism, plus
//!   noise calibration.
//! * [`models`]: a byte-level MLP language model with analytic gradients and a
//!   convex mean-estimation problem.
//! * [`mechanisms`]: Group Privacy, User-wise DP-SGD and the concentration
//!   filtered variant, with their training loops.
//! * [`analysis`]: effective-noise curves, gradient concentration probes and
//!   hyper-parameter sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod analysis;
pub mod corpus;
pub mod error;
pub mod mechanisms;
pub mod models;
pub mod rng;

pub use error::{Error, Result};
