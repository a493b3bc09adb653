//! Belief MDP over the augmented state `(τ, b)`.
//!
//! `b` is the posterior probability of the unfavorable mode. After action
//! `a` the predicted belief is `β̂ = P_c(1|0,a)(1 − b) + P_c(1|1,a) b` and the
//! observation `y = τ'` lands on `0` (delivery) or `τ + 1` (loss):
//!
//! ```text
//! σ(τ,b,0,a)   = λ(0,a)(1 − β̂) + λ(1,a) β̂
//! σ(τ,b,τ+1,a) = 1 − σ(τ,b,0,a)
//! T(τ,b,y,a)   = K(τ,1,y,a) β̂ / σ(τ,b,y,a)
//! ```

mod bellman;
mod verify;

pub use bellman::{
    bellman_apply, value_iterate, weighted_norm, Action, BeliefMdp, BellmanOperator, Grid, LatticeFn, Solution,
    SolverConfig, TieBreak, WeightFunction,
};
pub use verify::{
    check_m_stage_contraction, contraction_bound, verify_lemma6, verify_theorem1, ContractionReport, Direction, FsdViolation,
    Lemma6Report, MonotonicityReport, MonotonicityViolation, TViolation, MONOTONE_TOL,
};

use serde::Serialize;

use crate::channel::{ChannelModel, Mode};
use crate::error::{Error, Result};

/// Augmented state: holding time and belief of the unfavorable mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BeliefPoint {
    pub tau: usize,
    pub b: f64,
}

impl BeliefPoint {
    pub fn new(tau: usize, b: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::invalid(format!("belief {b} outside [0, 1]")));
        }
        Ok(Self { tau, b })
    }
}

/// `β̂(1; b, a)`, clamped to `[0, 1]`.
pub fn predictive_belief(ch: &ChannelModel, b: f64, a: usize) -> f64 {
    let to_bad_from_good = ch.transition_prob(Mode::Unfavorable, Mode::Favorable, a);
    let to_bad_from_bad = ch.transition_prob(Mode::Unfavorable, Mode::Unfavorable, a);
    (to_bad_from_good * (1.0 - b) + to_bad_from_bad * b).clamp(0.0, 1.0)
}

/// Likelihood and posterior of both observation branches at one `(b, a)`.
/// Neither depends on `τ`; only the failure branch's label `τ + 1` does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Branches {
    /// `[σ(·,b,0,a), σ(·,b,τ+1,a)]`.
    pub sigma: [f64; 2],
    /// Posterior after delivery and after loss; `None` when the branch has
    /// zero likelihood.
    pub posterior: [Option<f64>; 2],
}

pub(crate) fn branches(ch: &ChannelModel, b: f64, a: usize) -> Branches {
    let pred = predictive_belief(ch, b, a);
    let lam_good = ch.lambda(Mode::Favorable, a);
    let lam_bad = ch.lambda(Mode::Unfavorable, a);
    let s0 = lam_good * (1.0 - pred) + lam_bad * pred;
    let s1 = 1.0 - s0;
    let post = |joint: f64, sigma: f64| (sigma > 0.0).then(|| (joint / sigma).clamp(0.0, 1.0));
    Branches {
        sigma: [s0, s1],
        posterior: [post(lam_bad * pred, s0), post((1.0 - lam_bad) * pred, s1)],
    }
}

/// `σ(τ, b, y, a)`; zero off the support `{0, τ + 1}`.
pub fn likelihood_sigma(ch: &ChannelModel, tau: usize, b: f64, y: usize, a: usize) -> f64 {
    let br = branches(ch, b, a);
    if y == 0 {
        br.sigma[0]
    } else if y == tau + 1 {
        br.sigma[1]
    } else {
        0.0
    }
}

/// Bayes update `T(τ, b, y, a)`.
pub fn belief_update(ch: &ChannelModel, tau: usize, b: f64, y: usize, a: usize) -> Result<f64> {
    let br = branches(ch, b, a);
    let branch = if y == 0 {
        0
    } else if y == tau + 1 {
        1
    } else {
        return Err(Error::ZeroLikelihood { tau, y });
    };
    br.posterior[branch].ok_or(Error::ZeroLikelihood { tau, y })
}
