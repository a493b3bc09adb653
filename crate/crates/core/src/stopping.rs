//! Two-action optimal stopping: continue (`a = 0`, free) or stop (`a = 1`,
//! terminal cost `c_stop`). The optimal policy stops iff `b ≥ b_th(τ)`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::belief::{value_iterate, Action, BeliefMdp, Direction, Solution, SolverConfig, TieBreak, MONOTONE_TOL};
use crate::channel::ChannelModel;
use crate::error::{Error, Result};
use crate::lti::HoldingCostTable;
use crate::orders::{is_submodular, Verdict};

pub const CONTINUE: usize = 0;
pub const STOP: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingProblem {
    mdp: BeliefMdp,
    solver: SolverConfig,
}

impl StoppingProblem {
    pub fn new(channel: ChannelModel, holding: HoldingCostTable, solver: SolverConfig, c_stop: f64) -> Result<Self> {
        if !(c_stop.is_finite() && c_stop >= 0.0) {
            return Err(Error::invalid(format!("c_stop = {c_stop} must be finite and nonnegative")));
        }
        solver.validate()?;
        let mdp = BeliefMdp::new(channel, holding, vec![Action::transmit(0.0), Action::stop(c_stop)])?;
        Ok(Self { mdp, solver })
    }

    pub fn mdp(&self) -> &BeliefMdp {
        &self.mdp
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn c_stop(&self) -> f64 {
        self.mdp.actions()[STOP].cost
    }
}

/// Value iteration with the stop Q-value pinned to `c_stop`. The greedy
/// policy stops on ties, whatever `tie_break` the solver config carries.
pub fn solve_stopping(prob: &StoppingProblem) -> Result<Solution> {
    let cfg = SolverConfig {
        tie_break: TieBreak::Highest,
        ..prob.solver.clone()
    };
    value_iterate(&prob.mdp, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// Stop at grid index `index` (belief `index / grid_n`) and above.
    At { index: usize, belief: f64 },
    /// Never stop at this `τ`.
    AboveOne,
}

impl Threshold {
    /// Belief value, with the sentinel mapped to `+∞`.
    pub fn value(&self) -> f64 {
        match self {
            Threshold::At { belief, .. } => *belief,
            Threshold::AboveOne => f64::INFINITY,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        matches!(self, Threshold::AboveOne)
    }
}

/// `b_th(τ)` for `τ = 0..=τ_max`, resolved to the belief grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdFunction {
    pub grid_n: usize,
    pub thresholds: Vec<Threshold>,
}

impl ThresholdFunction {
    pub fn get(&self, tau: usize) -> Threshold {
        self.thresholds[tau.min(self.thresholds.len() - 1)]
    }

    /// Whether the threshold rule stops at grid index `i`.
    pub fn stops(&self, tau: usize, i: usize) -> bool {
        match self.get(tau) {
            Threshold::At { index, .. } => i >= index,
            Threshold::AboveOne => false,
        }
    }
}

fn require_stopping(sol: &Solution) -> Result<()> {
    let acts = sol.actions();
    if acts.len() != 2 || acts[CONTINUE].terminal || !acts[STOP].terminal {
        return Err(Error::invalid("solution is not a continue/stop problem"));
    }
    Ok(())
}

/// Smallest grid belief where stopping is no worse than continuing. Fails
/// if the stop set at some `τ` is not an upper interval of the grid.
pub fn extract_threshold(sol: &Solution) -> Result<ThresholdFunction> {
    require_stopping(sol)?;
    let g = sol.grid();
    let mut thresholds = Vec::with_capacity(g.n_taus());
    for tau in 0..=g.tau_max {
        let stops = |i: usize| sol.q(tau, i, STOP) <= sol.q(tau, i, CONTINUE);
        let first = (0..=g.grid_n).find(|&i| stops(i));
        match first {
            Some(index) => {
                if (index..=g.grid_n).any(|i| !stops(i)) {
                    return Err(Error::StructureViolation { tau });
                }
                thresholds.push(Threshold::At {
                    index,
                    belief: g.belief(index),
                });
            }
            None => thresholds.push(Threshold::AboveOne),
        }
    }
    Ok(ThresholdFunction {
        grid_n: g.grid_n,
        thresholds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdWitness {
    pub tau: usize,
    pub here: f64,
    pub next: f64,
}

/// `b_th(τ + 1) ≤ b_th(τ)` with the sentinel treated as `+∞`.
pub fn verify_theorem2(th: &ThresholdFunction) -> Verdict<ThresholdWitness> {
    th.thresholds
        .windows(2)
        .enumerate()
        .find(|(_, w)| w[1].value() > w[0].value())
        .map_or(Verdict::Holds, |(tau, w)| {
            Verdict::Violated(ThresholdWitness {
                tau,
                here: w[0].value(),
                next: w[1].value(),
            })
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaWitness {
    pub direction: Direction,
    pub tau: usize,
    pub index: usize,
    pub here: f64,
    pub next: f64,
}

/// `Δ_Q(τ, b) = Q(τ, b, 1) − Q(τ, b, 0)`.
pub fn delta_q(sol: &Solution, tau: usize, i: usize) -> f64 {
    sol.q(tau, i, STOP) - sol.q(tau, i, CONTINUE)
}

/// `Δ_Q` nonincreasing in `τ` and in `b` over adjacent lattice points.
pub fn verify_submodularity(sol: &Solution) -> Result<Verdict<DeltaWitness>> {
    require_stopping(sol)?;
    let g = sol.grid();
    for tau in 0..=g.tau_max {
        for i in 0..=g.grid_n {
            let here = delta_q(sol, tau, i);
            let mut next = Vec::with_capacity(2);
            if tau < g.tau_max {
                next.push((Direction::Tau, delta_q(sol, tau + 1, i)));
            }
            if i < g.grid_n {
                next.push((Direction::Belief, delta_q(sol, tau, i + 1)));
            }
            for (direction, n) in next {
                if n > here + MONOTONE_TOL {
                    return Ok(Verdict::Violated(DeltaWitness {
                        direction,
                        tau,
                        index: i,
                        here,
                        next: n,
                    }));
                }
            }
        }
    }
    Ok(Verdict::Holds)
}

/// The same property through [`is_submodular`]: every fixed-`τ` table
/// (rows `b`) and every fixed-`b` table (rows `τ`) must be submodular in
/// (state, action).
pub fn submodular_by_slices(sol: &Solution) -> Result<bool> {
    require_stopping(sol)?;
    let g = sol.grid();
    let by_tau = (0..=g.tau_max).all(|tau| {
        let m = DMatrix::from_fn(g.n_beliefs(), 2, |i, a| sol.q(tau, i, a));
        is_submodular(&m).holds()
    });
    let by_b = (0..=g.grid_n).all(|i| {
        let m = DMatrix::from_fn(g.n_taus(), 2, |tau, a| sol.q(tau, i, a));
        is_submodular(&m).holds()
    });
    Ok(by_tau && by_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::verify_theorem1;
    use crate::folding::random_channels;
    use crate::lti::{check_assumption2, holding_cost_table, steady_state_covariance, LtiSystem};

    fn holding(tau_max: usize) -> HoldingCostTable {
        let sys = LtiSystem::scalar(0.85, 1.0, 0.3, 0.3).unwrap();
        let ss = steady_state_covariance(&sys, 1e-12, 1_000_000).unwrap();
        holding_cost_table(&sys, &ss.pbar, tau_max).unwrap()
    }

    fn reference_channel() -> ChannelModel {
        ChannelModel::gilbert_elliott(0.9, 1.0, 0.9, 0.2, 0.0).unwrap()
    }

    fn problem(c_stop: f64, tau_max: usize, grid_n: usize) -> StoppingProblem {
        let cfg = SolverConfig {
            tau_max,
            grid_n,
            ..SolverConfig::with_gamma(0.95)
        };
        StoppingProblem::new(reference_channel(), holding(tau_max), cfg, c_stop).unwrap()
    }

    #[test]
    fn reference_structure() {
        let sol = solve_stopping(&problem(10.0, 60, 100)).unwrap();
        let th = extract_threshold(&sol).unwrap();
        assert!(verify_theorem2(&th).holds());
        assert!(verify_submodularity(&sol).unwrap().holds());
        assert!(submodular_by_slices(&sol).unwrap());
        assert!(verify_theorem1(&sol).holds());
        assert!(th.thresholds.iter().any(|t| !t.is_sentinel()));
        let g = sol.grid();
        for tau in 0..=g.tau_max {
            for i in 0..=g.grid_n {
                assert_eq!(sol.q(tau, i, STOP), 10.0);
                assert_eq!(sol.policy(tau, i) == STOP, th.stops(tau, i));
            }
        }
    }

    #[test]
    fn free_stop_stops_everywhere() {
        let sol = solve_stopping(&problem(0.0, 20, 20)).unwrap();
        let th = extract_threshold(&sol).unwrap();
        for t in &th.thresholds {
            assert_eq!(*t, Threshold::At { index: 0, belief: 0.0 });
        }
    }

    #[test]
    fn expensive_stop_never_stops() {
        let sol = solve_stopping(&problem(1e6, 20, 20)).unwrap();
        let th = extract_threshold(&sol).unwrap();
        assert!(th.thresholds.iter().all(Threshold::is_sentinel));
        assert!(verify_theorem2(&th).holds());
    }

    #[test]
    fn stop_structure_witness() {
        let th = ThresholdFunction {
            grid_n: 10,
            thresholds: vec![
                Threshold::At { index: 5, belief: 0.5 },
                Threshold::At { index: 5, belief: 0.5 },
                Threshold::AboveOne,
            ],
        };
        match verify_theorem2(&th) {
            Verdict::Violated(w) => assert_eq!(w.tau, 1),
            Verdict::Holds => panic!("sentinel after finite threshold must fail"),
        }
        let flat = ThresholdFunction {
            grid_n: 10,
            thresholds: vec![Threshold::At { index: 3, belief: 0.3 }; 4],
        };
        assert!(verify_theorem2(&flat).holds());
    }

    #[test]
    fn random_instances_have_monotone_thresholds() {
        for ch in random_channels(99, 20, 1) {
            let sys = LtiSystem::scalar(0.85, 1.0, 0.3, 0.3).unwrap();
            assert!(check_assumption2(&sys, &ch).holds);
            let cfg = SolverConfig {
                tau_max: 20,
                grid_n: 40,
                ..SolverConfig::with_gamma(0.95)
            };
            let prob = StoppingProblem::new(ch, holding(20), cfg, 10.0).unwrap();
            let sol = solve_stopping(&prob).unwrap();
            let th = extract_threshold(&sol).unwrap();
            assert!(verify_theorem2(&th).holds());
            assert!(verify_submodularity(&sol).unwrap().holds());
        }
    }

    #[test]
    fn non_interval_stop_region_is_reported() {
        use crate::belief::LatticeFn;
        let cfg = SolverConfig {
            tau_max: 2,
            grid_n: 4,
            ..SolverConfig::with_gamma(0.9)
        };
        // At τ = 1 the stop set is {1, 3}.
        let q = LatticeFn::from_fn(cfg.grid(2), |tau, i, a| match (tau, i, a) {
            (_, _, 1) => 1.0,
            (1, 1 | 3, 0) => 2.0,
            _ => 0.0,
        });
        let sol = Solution::new(q, vec![Action::transmit(0.0), Action::stop(1.0)], TieBreak::Highest, 1, vec![0.0]);
        assert_eq!(extract_threshold(&sol), Err(Error::StructureViolation { tau: 1 }));
    }

    #[test]
    fn rejects_non_stopping_solutions() {
        let mdp = BeliefMdp::new(reference_channel(), holding(5), vec![Action::transmit(0.0)]).unwrap();
        let cfg = SolverConfig {
            tau_max: 5,
            grid_n: 5,
            ..SolverConfig::with_gamma(0.9)
        };
        let sol = value_iterate(&mdp, &cfg).unwrap();
        assert!(extract_threshold(&sol).is_err());
        assert!(StoppingProblem::new(reference_channel(), holding(5), cfg, -1.0).is_err());
    }
}
