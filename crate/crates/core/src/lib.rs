//! Differentially private multi-group Gaussian sum queries.
//!
//! A training loop asks for noisy averages of several groups of vectors per
//! round. Each group is clipped and noised by its own mechanism; every
//! round's sampling and sum-query events go to an append-only [`ledger`],
//! and the [`accountant`] turns a ledger into an (epsilon, delta) guarantee
//! after the fact.

// `!(x > 0.0)` is how NaN gets rejected along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod allocation;
pub mod error;
pub mod harness;
pub mod hexfloat;
pub mod ledger;
pub mod mechanisms;
pub mod rng;
pub mod sampling;
pub mod vector;

pub use error::{DpError, Result};
