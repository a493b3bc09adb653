//! Holding-time and observation kernels, and their folded counterparts.
//!
//! The holding-time kernel `P_h(τ' | τ, θ, a)` puts mass `λ(θ,a)` on `τ' = 0`
//! and `1 − λ(θ,a)` on `τ' = τ + 1`. As a kernel in `(τ, τ')` it is never TP2
//! because the failure branch moves with `τ`. Folding re-indexes the
//! successor by the outcome `δ ∈ {0 (success), 1 (failure)}`:
//!
//! ```text
//! P_h^f(δ | τ, θ, a) = λ(θ,a) if δ = 0, 1 − λ(θ,a) if δ = 1
//! B^f(y | δ, τ)      = 1 if (δ, y) = (0, 0) or (1, τ + 1), else 0
//! K^f(τ, θ, y, a)    = Σ_δ B^f(y | δ, τ) P_h^f(δ | τ, θ, a)
//! ```
//!
//! Kernels are evaluated logically and only materialized as matrices for
//! the TP2 checks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::channel::{ChannelModel, Mode};
use crate::error::{Error, Result};
use crate::orders::{is_tp2, smallest_minor, KernelMatrix, Tp2Witness};

/// Transmission outcome on the folded space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Outcome {
    Success = 0,
    Failure = 1,
}

impl Outcome {
    pub const ALL: [Outcome; 2] = [Outcome::Success, Outcome::Failure];
}

/// `P_h(τ' | τ, θ, a)` over the unbounded holding-time axis.
#[derive(Debug, Clone, Copy)]
pub struct HoldingKernel<'a> {
    channel: &'a ChannelModel,
}

impl<'a> HoldingKernel<'a> {
    pub fn new(channel: &'a ChannelModel) -> Self {
        Self { channel }
    }

    pub fn prob(&self, next_tau: usize, tau: usize, theta: Mode, a: usize) -> f64 {
        let lam = self.channel.lambda(theta, a);
        if next_tau == 0 {
            lam
        } else if next_tau == tau + 1 {
            1.0 - lam
        } else {
            0.0
        }
    }

    /// Rows `τ ∈ 0..=τ_max`, columns `τ' ∈ 0..=τ_max + 1`.
    pub fn materialize(&self, theta: Mode, a: usize, tau_max: usize) -> KernelMatrix {
        let m = DMatrix::from_fn(tau_max + 1, tau_max + 2, |tau, next| self.prob(next, tau, theta, a));
        KernelMatrix::new(m).expect("probabilities are nonnegative")
    }
}

/// `P_h^f` and `B^f`.
#[derive(Debug, Clone, Copy)]
pub struct FoldedKernels<'a> {
    channel: &'a ChannelModel,
}

impl<'a> FoldedKernels<'a> {
    pub fn new(channel: &'a ChannelModel) -> Self {
        Self { channel }
    }

    /// `P_h^f(δ | τ, θ, a)`; independent of `τ`.
    pub fn phf(&self, delta: Outcome, _tau: usize, theta: Mode, a: usize) -> f64 {
        let lam = self.channel.lambda(theta, a);
        match delta {
            Outcome::Success => lam,
            Outcome::Failure => 1.0 - lam,
        }
    }

    /// `B^f(y | δ, τ, θ)`; independent of `θ`.
    pub fn bf(&self, y: usize, delta: Outcome, tau: usize, _theta: Mode) -> f64 {
        let hit = match delta {
            Outcome::Success => y == 0,
            Outcome::Failure => y == tau + 1,
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

/// `K(τ, θ, y, a) = Σ_{τ'} B(y | τ', θ) P_h(τ' | τ, θ, a)` with the identity
/// observation `B(y | τ') = 1{y = τ'}`, summed over `τ' ∈ 0..=τ+1`.
pub fn composite_k(ch: &ChannelModel, tau: usize, theta: Mode, y: usize, a: usize) -> f64 {
    let ph = HoldingKernel::new(ch);
    (0..=tau + 1)
        .map(|next| {
            let b = if y == next { 1.0 } else { 0.0 };
            b * ph.prob(next, tau, theta, a)
        })
        .sum()
}

/// `K^f(τ, θ, y, a) = Σ_δ B^f(y | δ, τ, θ) P_h^f(δ | τ, θ, a)`.
pub fn composite_kf(ch: &ChannelModel, tau: usize, theta: Mode, y: usize, a: usize) -> f64 {
    let folded = FoldedKernels::new(ch);
    Outcome::ALL
        .iter()
        .map(|&delta| folded.bf(y, delta, tau, theta) * folded.phf(delta, tau, theta, a))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop3Report {
    pub identical: bool,
    pub max_abs_diff: f64,
    pub points_checked: usize,
    /// First `(τ, θ, y, a)` where the kernels disagree.
    pub witness: Option<(usize, usize, usize, usize)>,
}

/// Exhaustive bitwise comparison of `K` and `K^f` over
/// `τ ∈ 0..=τ_max`, `θ`, `y ∈ 0..=τ_max + 1` and `a ∈ 0..n_actions`.
pub fn verify_prop3(ch: &ChannelModel, tau_max: usize, n_actions: usize) -> Prop3Report {
    let mut report = Prop3Report {
        identical: true,
        max_abs_diff: 0.0,
        points_checked: 0,
        witness: None,
    };
    for a in 0..n_actions {
        for tau in 0..=tau_max {
            for theta in Mode::ALL {
                for y in 0..=tau_max + 1 {
                    let k = composite_k(ch, tau, theta, y, a);
                    let kf = composite_kf(ch, tau, theta, y, a);
                    report.points_checked += 1;
                    if k.to_bits() != kf.to_bits() {
                        report.identical = false;
                        report.max_abs_diff = report.max_abs_diff.max((k - kf).abs());
                        report.witness.get_or_insert((tau, theta.index(), y, a));
                    }
                }
            }
        }
    }
    report
}

/// Kernel family and variable pair of one TP2 check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairCheck {
    pub kernel: &'static str,
    pub pair: &'static str,
    pub holds: bool,
    /// Smallest minor seen across all slices.
    pub min_minor: f64,
    pub slices: usize,
    /// First failing slice as `(fixed-variable description, witness)`.
    pub witness: Option<(String, Tp2Witness)>,
}

impl PairCheck {
    fn new(kernel: &'static str, pair: &'static str) -> Self {
        Self {
            kernel,
            pair,
            holds: true,
            min_minor: f64::INFINITY,
            slices: 0,
            witness: None,
        }
    }

    fn absorb(&mut self, slice: impl FnOnce() -> String, m: DMatrix<f64>) {
        let k = KernelMatrix::new(m).expect("kernel slices are nonnegative");
        self.slices += 1;
        if let Some(w) = smallest_minor(&k) {
            self.min_minor = self.min_minor.min(w.minor);
        }
        if let Some(w) = is_tp2(&k).witness() {
            self.holds = false;
            if self.witness.is_none() {
                self.witness = Some((slice(), *w));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma5Report {
    pub pairs: Vec<PairCheck>,
}

impl Lemma5Report {
    pub fn all_hold(&self) -> bool {
        self.pairs.iter().all(|p| p.holds)
    }

    pub fn pair(&self, kernel: &str, pair: &str) -> Option<&PairCheck> {
        self.pairs.iter().find(|p| p.kernel == kernel && p.pair == pair)
    }
}

/// TP2 checks of the folded kernels in every variable pair:
/// `P_h^f` in `(τ,θ)`, `(τ,δ)`, `(θ,δ)`; `B^f` in `(θ,y)`, `(δ,y)`;
/// `K` in `(τ,θ)`, `(θ,y)`. Variables not in the pair are held fixed and
/// every slice is checked for `τ ≤ τ_max`.
pub fn verify_lemma5(ch: &ChannelModel, tau_max: usize, n_actions: usize) -> Lemma5Report {
    let folded = FoldedKernels::new(ch);
    let taus = tau_max + 1;
    let ys = tau_max + 2;
    let delta_of = |i: usize| Outcome::ALL[i];
    let mode_of = |i: usize| Mode::ALL[i];

    let mut phf_tau_theta = PairCheck::new("P_h^f", "(tau,theta)");
    let mut phf_tau_delta = PairCheck::new("P_h^f", "(tau,delta)");
    let mut phf_theta_delta = PairCheck::new("P_h^f", "(theta,delta)");
    let mut bf_theta_y = PairCheck::new("B^f", "(theta,y)");
    let mut bf_delta_y = PairCheck::new("B^f", "(delta,y)");
    let mut k_tau_theta = PairCheck::new("K", "(tau,theta)");
    let mut k_theta_y = PairCheck::new("K", "(theta,y)");

    for a in 0..n_actions {
        for delta in Outcome::ALL {
            phf_tau_theta.absorb(
                || format!("delta={delta:?}, a={a}"),
                DMatrix::from_fn(taus, 2, |tau, th| folded.phf(delta, tau, mode_of(th), a)),
            );
        }
        for theta in Mode::ALL {
            phf_tau_delta.absorb(
                || format!("theta={}, a={a}", theta.index()),
                DMatrix::from_fn(taus, 2, |tau, d| folded.phf(delta_of(d), tau, theta, a)),
            );
        }
        for tau in 0..taus {
            phf_theta_delta.absorb(
                || format!("tau={tau}, a={a}"),
                DMatrix::from_fn(2, 2, |th, d| folded.phf(delta_of(d), tau, mode_of(th), a)),
            );
            k_theta_y.absorb(
                || format!("tau={tau}, a={a}"),
                DMatrix::from_fn(2, ys, |th, y| composite_k(ch, tau, mode_of(th), y, a)),
            );
        }
        for y in 0..ys {
            k_tau_theta.absorb(
                || format!("y={y}, a={a}"),
                DMatrix::from_fn(taus, 2, |tau, th| composite_k(ch, tau, mode_of(th), y, a)),
            );
        }
    }
    for tau in 0..taus {
        for delta in Outcome::ALL {
            bf_theta_y.absorb(
                || format!("delta={delta:?}, tau={tau}"),
                DMatrix::from_fn(2, ys, |th, y| folded.bf(y, delta, tau, mode_of(th))),
            );
        }
        for theta in Mode::ALL {
            bf_delta_y.absorb(
                || format!("theta={}, tau={tau}", theta.index()),
                DMatrix::from_fn(2, ys, |d, y| folded.bf(y, delta_of(d), tau, theta)),
            );
        }
    }

    Lemma5Report {
        pairs: vec![
            phf_tau_theta,
            phf_tau_delta,
            phf_theta_delta,
            bf_theta_y,
            bf_delta_y,
            k_tau_theta,
            k_theta_y,
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonTp2Demo {
    /// `P_h(0|0)P_h(1|2) − P_h(1|0)P_h(0|2)`.
    pub minor: f64,
    /// `((τ1, τ1'), (τ2, τ2'))` when the minor is negative.
    pub witness: Option<((usize, usize), (usize, usize))>,
}

/// The unfolded `P_h` restricted to rows `τ ∈ {0, 2}` and columns
/// `τ' ∈ {0, 1}`; its single minor is `−(1 − λ)λ`.
pub fn demo_non_tp2_ph(lambda: f64) -> Result<NonTp2Demo> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda = {lambda} is not a probability")));
    }
    let ch = ChannelModel::explicit(vec![[lambda, lambda]], vec![[[1.0, 0.0], [0.0, 1.0]]], 0.0)?;
    let ph = HoldingKernel::new(&ch);
    let rows = [0usize, 2];
    let cols = [0usize, 1];
    let m = DMatrix::from_fn(2, 2, |i, j| ph.prob(cols[j], rows[i], Mode::Favorable, 0));
    let k = KernelMatrix::new(m)?;
    let minor = smallest_minor(&k).expect("2x2 slice has one minor").minor;
    let witness = is_tp2(&k)
        .witness()
        .map(|w| ((rows[w.lower.0], cols[w.lower.1]), (rows[w.upper.0], cols[w.upper.1])));
    Ok(NonTp2Demo { minor, witness })
}

/// Random channel with `λ(0,a) ≥ λ(1,a)` and a TP2 mode kernel. Some draws
/// land on the degenerate values 0 and 1.
pub fn random_channel(rng: &mut impl Rng, n_tables: usize) -> ChannelModel {
    let mut success = Vec::with_capacity(n_tables);
    let mut transition = Vec::with_capacity(n_tables);
    for _ in 0..n_tables {
        let (x, y) = (random_prob(rng), random_prob(rng));
        success.push([x.max(y), x.min(y)]);
        let p00 = random_prob(rng);
        // p00 + p11 ≥ 1 keeps the 2x2 mode kernel TP2.
        let p11 = (1.0 - p00 + p00 * rng.random::<f64>()).clamp(0.0, 1.0);
        transition.push([[p00, 1.0 - p00], [1.0 - p11, p11]]);
    }
    let b0 = rng.random::<f64>();
    ChannelModel::explicit(success, transition, b0).expect("random channel is valid")
}

fn random_prob(rng: &mut impl Rng) -> f64 {
    match rng.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random::<f64>(),
    }
}

/// Convenience for sweeps: `n` seeded random channels.
pub fn random_channels(seed: u64, n: usize, n_tables: usize) -> Vec<ChannelModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_channel(&mut rng, n_tables)).collect()
}
