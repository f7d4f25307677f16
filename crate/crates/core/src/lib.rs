//! Robust Bayesian target-value optimization.
//!
//! Finds the input of a stochastic black box whose output is closest to a
//! target value in expected squared error `E(x) = (m(x) − y•)² + σ_a²(x)`.
//! A noise-free Gaussian process models the mean `m`, an [`aleatoric`] model
//! supplies `σ_a²`, and the acquisition functions in [`acquisition`] use the
//! non-central chi-square law of the normalized squared error to keep the
//! two sources of uncertainty apart.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod aleatoric;
pub mod engine;
pub mod error;
pub mod gp;
pub mod ncx2;
pub mod report;
pub mod special;

#[cfg(test)]
pub(crate) mod test_support;

pub use error::{Error, Result};
