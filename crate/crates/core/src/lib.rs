//! Transmission scheduling for remote state estimation over a two-mode
//! hidden Markov channel.
//!
//! The estimator's error covariance grows with the holding time `τ` since the
//! last delivered packet; the channel's mode is hidden and tracked by a
//! scalar belief `b`. The crate builds the resulting belief MDP, solves it by
//! value iteration on a belief grid, checks the structural results (TP2
//! kernels, monotone value functions, threshold policies), and simulates the
//! closed loop.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod belief;
pub mod channel;
pub mod cli;
pub mod config;
pub mod error;
pub mod folding;
pub mod lti;
pub mod orders;
pub mod output;
pub mod sim;
pub mod stopping;

pub use error::{Error, Result};
