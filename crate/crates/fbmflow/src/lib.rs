//! A simulation and verification laboratory for stochastic differential
//! equations driven by fractional Brownian motion with Hurst parameter
//! H > 1/2.
//!
//! The crate samples multidimensional fBm exactly, integrates the flow of
//! `dX = sum_i V_i(X) dB^i` together with its Jacobian, inverse Jacobian and
//! the frame coefficients alpha/beta along piecewise-linear driver
//! interpolations, assembles Malliavin covariance objects and first-order
//! integration-by-parts weights on a discrete Cameron-Martin space with exact
//! cell weights, and runs Monte Carlo experiments that check semigroup
//! gradient bounds and related functional inequalities against independent
//! closed-form oracles.
//!
//! Layering, bottom to top:
//!
//! - [`fbm`]: grids, exact samplers, covariance, Volterra kernel, seminorms;
//! - [`systems`]: vector-field frames, Lie brackets, structure constants;
//! - [`flow`]: pathwise Young/ODE integration of `(X, J, J^{-1}, alpha, beta)`;
//! - [`malliavin`]: cell weights, Malliavin derivatives, covariance matrices,
//!   Skorokhod integrals and IBP weights;
//! - [`estimators`]: Monte Carlo semigroup and gradient estimators;
//! - [`verify`]: experiment harness and report persistence;
//! - [`cli`]: command-line front end.

pub mod error;
pub mod estimators;
pub mod fbm;
pub mod flow;
pub mod malliavin;
pub mod quad;
pub mod systems;
pub mod verify;

pub mod cli;
pub mod config;

pub use error::{Error, Result};
