//! Maximum-likelihood estimation of discrete mixture models written as
//! entropic optimal transport.
//!
//! The negative log-likelihood of a mixture with weights `π` and component
//! parameters `θ` equals `n` times a semi-relaxed entropic OT problem with
//! cost `C_ij(θ) = -log P(x_i | j, θ)`, is bounded above by the full entropic
//! OT problem with column marginal `π`, and coincides with it after
//! minimizing over `π`. For a shared-covariance Gaussian mixture, block
//! coordinate descent on that objective is exactly the EM algorithm.
//!
//! Modules, bottom up: [`types`], [`divergence`], [`eot`], [`mixture`],
//! [`bcd`], [`verify`], [`io`] and [`cli`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bcd;
pub mod cli;
pub mod divergence;
pub mod eot;
pub mod error;
pub mod io;
pub mod mixture;
pub mod types;
pub mod verify;

pub use error::{Error, Result};
