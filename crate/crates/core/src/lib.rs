//! Nonparametric off-policy policy gradients.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod baselines;
pub mod config;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod experiments;
pub mod gradient;
pub mod kernels;
pub mod npbe;
pub mod optimizer;
pub mod policy;
pub mod rng;
pub mod solver;

pub use error::{NopgError, Result};
