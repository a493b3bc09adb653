//! Structural checks on the belief dynamics and on converged solutions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::bellman::{check_preconditions, BeliefMdp, BellmanOperator, LatticeFn, Solution, SolverConfig};
use super::{belief_update, likelihood_sigma};
use crate::channel::ChannelModel;
use crate::error::{Error, Result};
use crate::orders::{fsd_dominates, FiniteDist, FsdWitness, Verdict, ORDER_TOL};

/// Violations kept per report; counts are always exact.
const MAX_WITNESSES: usize = 32;

/// Monotonicity tolerance for converged value functions.
pub const MONOTONE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Tau,
    Belief,
    Observation,
}

/// `T` decreased along one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TViolation {
    pub direction: Direction,
    pub action: usize,
    pub tau: usize,
    pub belief: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FsdViolation {
    pub action: usize,
    pub low: (usize, f64),
    pub high: (usize, f64),
    /// Witness in observation labels rather than support indices.
    pub witness: FsdWitness,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma6Report {
    pub t_checks: usize,
    pub t_violation_count: usize,
    pub t_violations: Vec<TViolation>,
    pub fsd_checks: usize,
    pub fsd_violation_count: usize,
    pub fsd_violations: Vec<FsdViolation>,
}

impl Lemma6Report {
    pub fn holds(&self) -> bool {
        self.t_violation_count == 0 && self.fsd_violation_count == 0
    }
}

fn push_capped<T>(list: &mut Vec<T>, count: &mut usize, item: T) {
    *count += 1;
    if list.len() < MAX_WITNESSES {
        list.push(item);
    }
}

/// `σ(τ, b, ·, a)` on the sorted observation support `labels`.
fn sigma_on(ch: &ChannelModel, tau: usize, b: f64, a: usize, labels: &[usize]) -> Result<FiniteDist> {
    let pmf: Vec<f64> = labels.iter().map(|&y| likelihood_sigma(ch, tau, b, y, a)).collect();
    let total: f64 = pmf.iter().sum();
    FiniteDist::new(pmf.into_iter().map(|p| p / total).collect())
}

fn check_fsd(
    ch: &ChannelModel,
    a: usize,
    low: (usize, f64),
    high: (usize, f64),
) -> Result<Option<FsdViolation>> {
    let mut labels = vec![0, low.0 + 1, high.0 + 1];
    labels.sort_unstable();
    labels.dedup();
    let p1 = sigma_on(ch, low.0, low.1, a, &labels)?;
    let p2 = sigma_on(ch, high.0, high.1, a, &labels)?;
    Ok(match fsd_dominates(&p1, &p2)? {
        Verdict::Holds => None,
        Verdict::Violated(w) => Some(FsdViolation {
            action: a,
            low,
            high,
            witness: FsdWitness {
                threshold: labels[w.threshold],
                ..w
            },
        }),
    })
}

/// Checks that `T` is nondecreasing in `τ`, `b` and `y` over the solver
/// grid, and that `σ(τ, b, ·, a)` increases in first-order stochastic
/// dominance. The FSD part runs on all adjacent lattice pairs plus
/// `random_pairs` seeded draws of arbitrary ordered pairs.
pub fn verify_lemma6(
    ch: &ChannelModel,
    cfg: &SolverConfig,
    n_actions: usize,
    random_pairs: usize,
    seed: u64,
) -> Result<Lemma6Report> {
    cfg.validate()?;
    let grid = cfg.grid(n_actions);
    let mut rep = Lemma6Report {
        t_checks: 0,
        t_violation_count: 0,
        t_violations: Vec::new(),
        fsd_checks: 0,
        fsd_violation_count: 0,
        fsd_violations: Vec::new(),
    };
    let t = |tau: usize, b: f64, branch: usize, a: usize| {
        let y = if branch == 0 { 0 } else { tau + 1 };
        belief_update(ch, tau, b, y, a).ok()
    };

    for a in 0..n_actions {
        for tau in 0..=grid.tau_max {
            for i in 0..=grid.grid_n {
                let b = grid.belief(i);
                let here = [t(tau, b, 0, a), t(tau, b, 1, a)];
                let mut compare = |direction, lower: Option<f64>, upper: Option<f64>| {
                    if let (Some(lo), Some(hi)) = (lower, upper) {
                        rep.t_checks += 1;
                        if lo > hi + ORDER_TOL {
                            push_capped(
                                &mut rep.t_violations,
                                &mut rep.t_violation_count,
                                TViolation {
                                    direction,
                                    action: a,
                                    tau,
                                    belief: b,
                                    lower: lo,
                                    upper: hi,
                                },
                            );
                        }
                    }
                };
                compare(Direction::Observation, here[0], here[1]);
                for (branch, &cur) in here.iter().enumerate() {
                    if tau < grid.tau_max {
                        compare(Direction::Tau, cur, t(tau + 1, b, branch, a));
                    }
                    if i < grid.grid_n {
                        compare(Direction::Belief, cur, t(tau, grid.belief(i + 1), branch, a));
                    }
                }
            }
        }
    }

    let mut fsd = |a: usize, low: (usize, f64), high: (usize, f64)| -> Result<()> {
        rep.fsd_checks += 1;
        if let Some(v) = check_fsd(ch, a, low, high)? {
            push_capped(&mut rep.fsd_violations, &mut rep.fsd_violation_count, v);
        }
        Ok(())
    };
    for a in 0..n_actions {
        for tau in 0..=grid.tau_max {
            for i in 0..=grid.grid_n {
                let here = (tau, grid.belief(i));
                if tau < grid.tau_max {
                    fsd(a, here, (tau + 1, here.1))?;
                }
                if i < grid.grid_n {
                    fsd(a, here, (tau, grid.belief(i + 1)))?;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random_pairs {
        let a = rng.random_range(0..n_actions);
        let (t1, t2) = ordered(&mut rng, grid.tau_max);
        let (i1, i2) = ordered(&mut rng, grid.grid_n);
        fsd(a, (t1, grid.belief(i1)), (t2, grid.belief(i2)))?;
    }
    Ok(rep)
}

fn ordered(rng: &mut impl Rng, max: usize) -> (usize, usize) {
    let x = rng.random_range(0..=max);
    let y = rng.random_range(0..=max);
    (x.min(y), x.max(y))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityViolation {
    /// `None` for `V`, otherwise the Q action slice.
    pub slice: Option<usize>,
    pub direction: Direction,
    pub tau: usize,
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub checks: usize,
    pub violation_count: usize,
    pub violations: Vec<MonotonicityViolation>,
}

impl MonotonicityReport {
    pub fn holds(&self) -> bool {
        self.violation_count == 0
    }
}

/// `V` and every Q slice nondecreasing in `τ` and in `b`, to `1e-8`.
pub fn verify_theorem1(sol: &Solution) -> MonotonicityReport {
    let g = sol.grid();
    let mut rep = MonotonicityReport {
        checks: 0,
        violation_count: 0,
        violations: Vec::new(),
    };
    let slices = std::iter::once(None).chain((0..g.n_actions).map(Some));
    for slice in slices {
        let f = |tau: usize, i: usize| match slice {
            None => sol.v(tau, i),
            Some(a) => sol.q(tau, i, a),
        };
        for tau in 0..=g.tau_max {
            for i in 0..=g.grid_n {
                let here = f(tau, i);
                let mut next = Vec::with_capacity(2);
                if tau < g.tau_max {
                    next.push((Direction::Tau, f(tau + 1, i)));
                }
                if i < g.grid_n {
                    next.push((Direction::Belief, f(tau, i + 1)));
                }
                for (direction, upper) in next {
                    rep.checks += 1;
                    if here > upper + MONOTONE_TOL {
                        push_capped(
                            &mut rep.violations,
                            &mut rep.violation_count,
                            MonotonicityViolation {
                                slice,
                                direction,
                                tau,
                                index: i,
                                lower: here,
                                upper,
                            },
                        );
                    }
                }
            }
        }
    }
    rep
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    /// `(1 − λ̲) s(1)`.
    pub alpha: f64,
    /// `s(1) = max(1, ρ(A) + ε)²`.
    pub weight_ratio: f64,
    /// Smallest certified stage count, if one was found.
    pub m: Option<usize>,
    /// `γ^m · sup_τ Σ_y ℙ(τ_m = y | τ) s(y)/s(τ)` at the certified `m`.
    pub certified_modulus: Option<f64>,
    pub trials: usize,
    /// Largest observed `‖𝔗^m Q1 − 𝔗^m Q2‖_s / ‖Q1 − Q2‖_s`.
    pub empirical_ratio: f64,
}

impl ContractionReport {
    pub fn certified(&self) -> bool {
        self.m.is_some()
    }

    pub fn empirical_ok(&self) -> bool {
        self.empirical_ratio < 1.0
    }
}

/// Largest stage count tried when searching for `m`.
const MAX_STAGES: usize = 10_000;

/// Upper bound on `Σ_y ℙ(τ_m = y | τ_0 = τ) s(y)/s(τ)`, maximized over all
/// distributions whose masses respect the caps `(1 − λ̲)^y` for `y < m` and
/// `(1 − λ̲)^m` at `y = τ + m`, filled greedily from the heaviest weight.
pub fn contraction_bound(m: usize, tau: usize, lambda_min: f64, weight_ratio: f64) -> f64 {
    let miss = 1.0 - lambda_min;
    let rel = |y: usize| weight_ratio.powf(y as f64 - tau as f64);
    // Candidate atoms as (weight, cap): y = τ + m first, then y = m−1 … 0.
    let atoms = std::iter::once((rel(tau + m), miss.powi(m as i32)))
        .chain((0..m).rev().map(|y| (rel(y), miss.powi(y as i32))));
    let mut left = 1.0_f64;
    let mut total = 0.0;
    for (w, cap) in atoms {
        if left <= 0.0 {
            break;
        }
        let mass = cap.min(left);
        total += mass * w;
        left -= mass;
    }
    total
}

/// Finds the smallest `m` with `γ^m · sup_τ bound < 1`, then measures the
/// `m`-sweep Lipschitz ratio on `trials` random pairs `Q = s(τ)·U(−1, 1)`.
pub fn check_m_stage_contraction(
    mdp: &BeliefMdp,
    cfg: &SolverConfig,
    trials: usize,
    seed: u64,
) -> Result<ContractionReport> {
    let weight = check_preconditions(mdp, cfg)?;
    let lambda_min = mdp.channel().lambda_min();
    let ratio = weight.step_ratio();
    let alpha = (1.0 - lambda_min) * ratio;
    if ratio > 1.0 && alpha >= 1.0 {
        return Err(Error::Precondition(format!("alpha = {alpha} is not below 1")));
    }

    let mut m = None;
    let mut modulus = None;
    for stages in 1..=MAX_STAGES {
        let worst = (0..=cfg.tau_max)
            .map(|tau| contraction_bound(stages, tau, lambda_min, ratio))
            .fold(0.0, f64::max);
        let k = cfg.gamma.powi(stages as i32) * worst;
        if k < 1.0 {
            m = Some(stages);
            modulus = Some(k);
            break;
        }
    }

    let op = BellmanOperator::new(mdp, cfg)?;
    let grid = op.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut empirical: f64 = 0.0;
    let sweeps = m.unwrap_or(1);
    for _ in 0..trials {
        let mut q1 = LatticeFn::from_fn(grid, |tau, _, _| weight.s(tau) * rng.random_range(-1.0..1.0));
        let mut q2 = LatticeFn::from_fn(grid, |tau, _, _| weight.s(tau) * rng.random_range(-1.0..1.0));
        let before = lattice_distance(&q1, &q2, &weight);
        if before == 0.0 {
            continue;
        }
        for _ in 0..sweeps {
            q1 = op.apply(&q1)?;
            q2 = op.apply(&q2)?;
        }
        empirical = empirical.max(lattice_distance(&q1, &q2, &weight) / before);
    }

    Ok(ContractionReport {
        alpha,
        weight_ratio: ratio,
        m,
        certified_modulus: modulus,
        trials,
        empirical_ratio: empirical,
    })
}

fn lattice_distance(q1: &LatticeFn, q2: &LatticeFn, weight: &super::WeightFunction) -> f64 {
    let diff = q1.values().iter().zip(q2.values()).map(|(a, b)| a - b).collect();
    // Same grid by construction.
    let diff = LatticeFn::from_values(q1.grid(), diff).expect("matching lattices");
    super::weighted_norm(&diff, weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::{value_iterate, Action};
    use crate::folding::random_channels;
    use crate::lti::{holding_cost_table, steady_state_covariance, HoldingCostTable, LtiSystem};

    fn holding(a: f64, tau_max: usize) -> HoldingCostTable {
        let sys = LtiSystem::scalar(a, 1.0, 0.3, 0.3).unwrap();
        let ss = steady_state_covariance(&sys, 1e-12, 1_000_000).unwrap();
        holding_cost_table(&sys, &ss.pbar, tau_max).unwrap()
    }

    fn reference_channel() -> ChannelModel {
        ChannelModel::gilbert_elliott(0.9, 1.0, 0.9, 0.2, 0.0).unwrap()
    }

    fn cfg(tau_max: usize, grid_n: usize) -> SolverConfig {
        SolverConfig {
            tau_max,
            grid_n,
            ..SolverConfig::with_gamma(0.95)
        }
    }

    #[test]
    fn belief_update_monotone_reference_channel() {
        let rep = verify_lemma6(&reference_channel(), &cfg(60, 200), 1, 10_000, 7).unwrap();
        assert!(rep.holds(), "{rep:?}");
        assert!(rep.t_checks > 0 && rep.fsd_checks > 10_000);
        let lo = belief_update(&reference_channel(), 3, 0.5, 0, 0).unwrap();
        let hi = belief_update(&reference_channel(), 3, 0.5, 4, 0).unwrap();
        assert!(lo <= hi);
    }

    #[test]
    fn belief_update_monotone_random_channels() {
        for ch in random_channels(5, 20, 1) {
            let rep = verify_lemma6(&ch, &cfg(10, 20), 1, 500, 1).unwrap();
            assert!(rep.holds(), "{rep:?}");
        }
    }

    #[test]
    fn value_monotone_random_channels() {
        for ch in random_channels(21, 20, 1) {
            let mdp = BeliefMdp::new(ch, holding(0.85, 20), vec![Action::transmit(0.0), Action::stop(10.0)]).unwrap();
            let sol = value_iterate(&mdp, &cfg(20, 40)).unwrap();
            let rep = verify_theorem1(&sol);
            assert!(rep.holds(), "{rep:?}");
        }
    }

    #[test]
    fn value_monotone_constant_cost() {
        // A = 0, Q = 0 gives a zero, hence constant, holding cost.
        let sys = LtiSystem::scalar(0.0, 1.0, 0.0, 0.3).unwrap();
        let ss = steady_state_covariance(&sys, 1e-12, 1_000).unwrap();
        let h = holding_cost_table(&sys, &ss.pbar, 10).unwrap();
        let mdp = BeliefMdp::new(reference_channel(), h, vec![Action::transmit(0.0)]).unwrap();
        let sol = value_iterate(&mdp, &cfg(10, 10)).unwrap();
        assert!(verify_theorem1(&sol).holds());
        assert_eq!(sol.v(0, 0), sol.v(10, 10));
    }

    #[test]
    fn bound_is_gamma_power_with_flat_weights() {
        assert_eq!(contraction_bound(1, 0, 0.2, 1.0), 1.0);
        assert_eq!(contraction_bound(4, 17, 0.2, 1.0), 1.0);
    }

    #[test]
    fn reference_contraction_is_one_stage() {
        let mdp = BeliefMdp::new(reference_channel(), holding(0.85, 60), vec![Action::transmit(0.0), Action::stop(10.0)])
            .unwrap();
        let rep = check_m_stage_contraction(&mdp, &cfg(60, 50), 20, 3).unwrap();
        assert_eq!(rep.m, Some(1));
        assert!(rep.empirical_ratio <= 0.95 + 1e-12, "{rep:?}");
    }

    #[test]
    fn unstable_contraction_finds_m() {
        let ch = ChannelModel::gilbert_elliott(0.9, 1.0, 0.9, 0.5, 0.0).unwrap();
        let mdp = BeliefMdp::new(ch, holding(1.05, 60), vec![Action::transmit(0.0)]).unwrap();
        let rep = check_m_stage_contraction(&mdp, &cfg(60, 20), 10, 3).unwrap();
        let m = rep.m.expect("finite m");
        assert!(m > 1);
        assert!(rep.empirical_ok(), "{rep:?}");
    }

    #[test]
    fn identical_pairs_contribute_nothing() {
        let mdp = BeliefMdp::new(reference_channel(), holding(0.85, 10), vec![Action::transmit(0.0)]).unwrap();
        let rep = check_m_stage_contraction(&mdp, &cfg(10, 10), 0, 3).unwrap();
        assert_eq!(rep.empirical_ratio, 0.0);
    }
}
