//! Belief-grid refinement behavior of the value function.

use remote_sched::belief::{value_iterate, Action, BeliefMdp, Solution, SolverConfig};
use remote_sched::channel::ChannelModel;
use remote_sched::lti::{holding_cost_table, steady_state_covariance, HoldingCostTable, LtiSystem};
use remote_sched::stopping::{solve_stopping, StoppingProblem};

fn holding() -> HoldingCostTable {
    let sys = LtiSystem::scalar(0.85, 1.0, 0.3, 0.3).unwrap();
    let ss = steady_state_covariance(&sys, 1e-12, 1_000_000).unwrap();
    holding_cost_table(&sys, &ss.pbar, 60).unwrap()
}

fn cfg(grid_n: usize) -> SolverConfig {
    SolverConfig {
        tau_max: 60,
        grid_n,
        ..SolverConfig::with_gamma(0.95)
    }
}

/// Max difference at the interior beliefs `k / 25`, all `τ`.
fn interior_gap(a: &Solution, b: &Solution) -> f64 {
    let mut gap = 0.0_f64;
    for tau in 0..=60 {
        for k in 1..25 {
            let x = f64::from(k) / 25.0;
            gap = gap.max((a.value_at(tau, x) - b.value_at(tau, x)).abs());
        }
    }
    gap
}

#[test]
fn fixed_action_value_is_exact_on_any_grid() {
    // Without a choice V is affine in b, so linear interpolation is exact.
    for ch in [
        ChannelModel::gilbert_elliott(0.9, 1.0, 0.9, 0.2, 0.0).unwrap(),
        ChannelModel::gilbert_elliott(0.9, 0.8, 0.9, 0.2, 0.0).unwrap(),
    ] {
        let mdp = BeliefMdp::new(ch, holding(), vec![Action::transmit(0.0)]).unwrap();
        let coarse = value_iterate(&mdp, &cfg(25)).unwrap();
        let fine = value_iterate(&mdp, &cfg(400)).unwrap();
        assert!(interior_gap(&coarse, &fine) < 1e-12);
    }
}

#[test]
fn stopping_value_converges_at_first_order() {
    // The stop decision puts a kink in V at b_th(τ); interpolating across
    // it costs O(1/grid_n), so errors roughly halve per doubling.
    let ch = ChannelModel::gilbert_elliott(0.9, 1.0, 0.9, 0.2, 0.0).unwrap();
    let solve = |n| solve_stopping(&StoppingProblem::new(ch.clone(), holding(), cfg(n), 10.0).unwrap()).unwrap();
    let reference = solve(1600);
    let errs: Vec<f64> = [25, 50, 100].iter().map(|&n| interior_gap(&solve(n), &reference)).collect();
    for w in errs.windows(2) {
        let rate = w[0] / w[1];
        assert!(rate >= 1.5, "errors {errs:?}");
    }
    assert!(errs[2] < 1.5e-3, "errors {errs:?}");
}
