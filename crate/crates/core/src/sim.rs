//! Monte Carlo closed loop: hidden mode, transmission outcomes, ACK-driven
//! holding time, belief recursion and discounted cost.
//!
//! Within a step the mode moves first, then the packet succeeds with
//! probability `λ(θ_{t+1}, a_t)`, then `τ` and `b` are updated from the ACK.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{belief_update, predictive_belief, BeliefMdp, Solution};
use crate::channel::{sample_initial_mode, sample_mode_step, ChannelModel, Mode};
use crate::error::{Error, Result};
use crate::stopping::{CONTINUE, STOP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub horizon: usize,
    pub n_runs: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::invalid("sim.horizon must be at least 1"));
        }
        if self.n_runs < 1 {
            return Err(Error::invalid("sim.n_runs must be at least 1"));
        }
        Ok(())
    }
}

/// Greedy action per lattice point, read at the nearest grid belief.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    tau_max: usize,
    grid_n: usize,
    actions: Vec<usize>,
}

impl PolicyTable {
    /// `actions` is `[τ][i]` flattened row-major.
    pub fn new(tau_max: usize, grid_n: usize, actions: Vec<usize>) -> Result<Self> {
        if grid_n == 0 || actions.len() != (tau_max + 1) * (grid_n + 1) {
            return Err(Error::invalid(format!(
                "policy table needs {} entries for tau_max = {tau_max}, grid_n = {grid_n}, got {}",
                (tau_max + 1) * (grid_n + 1),
                actions.len()
            )));
        }
        Ok(Self {
            tau_max,
            grid_n,
            actions,
        })
    }

    pub fn from_solution(sol: &Solution) -> Self {
        let g = sol.grid();
        let actions = (0..=g.tau_max)
            .flat_map(|tau| (0..=g.grid_n).map(move |i| (tau, i)))
            .map(|(tau, i)| sol.policy(tau, i))
            .collect();
        Self {
            tau_max: g.tau_max,
            grid_n: g.grid_n,
            actions,
        }
    }

    pub fn action(&self, tau: usize, b: f64) -> usize {
        let i = (b.clamp(0.0, 1.0) * self.grid_n as f64).round() as usize;
        self.actions[tau.min(self.tau_max) * (self.grid_n + 1) + i.min(self.grid_n)]
    }

    fn max_action(&self) -> usize {
        self.actions.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Solved(PolicyTable),
    NeverStop,
    StopNow,
    /// Stop iff `b ≥ c`.
    FixedThreshold(f64),
}

impl Policy {
    pub fn action(&self, tau: usize, b: f64) -> usize {
        match self {
            Policy::Solved(table) => table.action(tau, b),
            Policy::NeverStop => CONTINUE,
            Policy::StopNow => STOP,
            Policy::FixedThreshold(c) => {
                if b >= *c {
                    STOP
                } else {
                    CONTINUE
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Policy::Solved(_) => "solved".into(),
            Policy::NeverStop => "never-stop".into(),
            Policy::StopNow => "stop-now".into(),
            Policy::FixedThreshold(c) => format!("threshold:{c}"),
        }
    }

    fn check(&self, mdp: &BeliefMdp) -> Result<()> {
        let acts = mdp.actions();
        let needs = match self {
            Policy::Solved(table) => return check_action(acts.len(), table.max_action()),
            Policy::NeverStop => CONTINUE,
            Policy::StopNow | Policy::FixedThreshold(_) => STOP,
        };
        check_action(acts.len(), needs)?;
        if needs == STOP && !acts[STOP].terminal {
            return Err(Error::invalid(format!("policy {} needs action 1 to be stop", self.name())));
        }
        Ok(())
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    /// Parses `never-stop`, `stop-now` or `threshold:<c>`; `solved` needs a
    /// table and is handled by the caller.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "never-stop" => Ok(Policy::NeverStop),
            "stop-now" => Ok(Policy::StopNow),
            _ => {
                let c = s
                    .strip_prefix("threshold:")
                    .and_then(|c| c.parse::<f64>().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown policy '{s}'")))?;
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::invalid(format!("threshold {c} outside [0, 1]")));
                }
                Ok(Policy::FixedThreshold(c))
            }
        }
    }
}

fn check_action(n_actions: usize, a: usize) -> Result<()> {
    if a >= n_actions {
        return Err(Error::invalid(format!("policy uses action {a} but only {n_actions} are defined")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub theta: Mode,
    pub action: usize,
    /// ACK that produced `τ_t`; `None` at `t = 0`.
    pub delivered: Option<bool>,
    pub tau: usize,
    pub belief: f64,
    /// Undiscounted stage cost.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimTrace {
    pub steps: Vec<StepRecord>,
    pub stop_time: Option<usize>,
    pub discounted_cost: f64,
    /// Mode after each non-terminal step, i.e. the mode the packet saw.
    pub next_modes: Vec<Mode>,
}

/// One episode from `τ_0 = 0`, `θ_0 ~ p_c`, `b_0 = p_c(1)`.
pub fn run_episode(
    mdp: &BeliefMdp,
    policy: &Policy,
    gamma: f64,
    horizon: usize,
    rng: &mut impl Rng,
) -> SimTrace {
    let ch = mdp.channel();
    let mut theta = sample_initial_mode(ch, rng);
    let (mut tau, mut b) = (0, ch.b0());
    let mut delivered = None;
    let mut discount = 1.0;
    let mut trace = SimTrace {
        steps: Vec::with_capacity(horizon),
        stop_time: None,
        discounted_cost: 0.0,
        next_modes: Vec::with_capacity(horizon),
    };
    for t in 0..horizon {
        let a = policy.action(tau, b);
        let cost = mdp.stage_cost(tau, b, a);
        trace.steps.push(StepRecord {
            t,
            theta,
            action: a,
            delivered,
            tau,
            belief: b,
            cost,
        });
        trace.discounted_cost += discount * cost;
        if mdp.actions()[a].terminal {
            trace.stop_time = Some(t);
            break;
        }
        let next = sample_mode_step(ch, theta, a, rng);
        let u: f64 = rng.random();
        let ok = u < ch.lambda(next, a);
        let y = if ok { 0 } else { tau + 1 };
        // The realized branch always has positive likelihood under the
        // exact posterior; the fallback only guards degenerate priors.
        b = belief_update(ch, tau, b, y, a).unwrap_or_else(|_| predictive_belief(ch, b, a));
        tau = if ok { 0 } else { tau + 1 };
        delivered = Some(ok);
        theta = next;
        trace.next_modes.push(next);
        discount *= gamma;
    }
    trace
}

/// Recomputes `τ_t` and `b_t` from the logged actions and ACKs and returns
/// the first step whose logged value differs (bitwise for `b`).
pub fn first_inconsistency(trace: &SimTrace, ch: &ChannelModel) -> Option<usize> {
    let first = trace.steps.first()?;
    if first.tau != 0 || first.belief.to_bits() != ch.b0().to_bits() {
        return Some(0);
    }
    for (t, w) in trace.steps.windows(2).enumerate() {
        let (prev, cur) = (&w[0], &w[1]);
        let Some(ok) = cur.delivered else {
            return Some(t + 1);
        };
        let y = if ok { 0 } else { prev.tau + 1 };
        let expect_b = belief_update(ch, prev.tau, prev.belief, y, prev.action)
            .unwrap_or_else(|_| predictive_belief(ch, prev.belief, prev.action));
        if cur.tau != y || cur.belief.to_bits() != expect_b.to_bits() {
            return Some(t + 1);
        }
    }
    None
}

pub fn validate_belief_consistency(trace: &SimTrace, ch: &ChannelModel) -> bool {
    first_inconsistency(trace, ch).is_none()
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output mix.
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `i`: the `(i + 1)`-th SplitMix64 output from state
/// `base`.
pub fn replication_seed(base: u64, i: u64) -> u64 {
    splitmix64(base.wrapping_add(i.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

pub fn replication_rng(base: u64, i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(replication_seed(base, i))
}

/// Pairwise summation in blocks of 8.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EpisodeSummary {
    cost: f64,
    stop_time: Option<usize>,
    mode_steps: [u64; 2],
    /// `[a][θ']` counts.
    transmissions: Vec<[u64; 2]>,
    deliveries: Vec<[u64; 2]>,
}

fn summarize(trace: &SimTrace, n_actions: usize) -> EpisodeSummary {
    let mut s = EpisodeSummary {
        cost: trace.discounted_cost,
        stop_time: trace.stop_time,
        mode_steps: [0; 2],
        transmissions: vec![[0; 2]; n_actions],
        deliveries: vec![[0; 2]; n_actions],
    };
    for step in &trace.steps {
        s.mode_steps[step.theta.index()] += 1;
    }
    // Step t's packet saw next_modes[t]; its ACK is logged at step t + 1,
    // except for the final step of a truncated run.
    for (t, next) in trace.next_modes.iter().enumerate() {
        if let Some(ok) = trace.steps.get(t + 1).and_then(|s| s.delivered) {
            let a = trace.steps[t].action;
            s.transmissions[a][next.index()] += 1;
            s.deliveries[a][next.index()] += u64::from(ok);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimStats {
    pub policy: String,
    pub n_runs: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub seed: u64,
    pub mean_cost: f64,
    pub std_dev: f64,
    /// `std_dev / √n_runs`.
    pub std_error: f64,
    /// `γ^H · max stage cost / (1 − γ)`.
    pub truncation_bias_bound: f64,
    /// `(t, count)` for episodes that stopped at step `t`.
    pub stop_histogram: Vec<(usize, u64)>,
    pub never_stopped: u64,
    /// Fraction of logged steps spent in each mode.
    pub mode_occupancy: [f64; 2],
    /// `[a][θ']` transmission and delivery counts.
    pub transmissions: Vec<[u64; 2]>,
    pub deliveries: Vec<[u64; 2]>,
}

impl SimStats {
    /// Empirical `λ(θ', a)`, `None` without attempts.
    pub fn success_rate(&self, a: usize, mode: Mode) -> Option<f64> {
        let n = self.transmissions.get(a)?[mode.index()];
        (n > 0).then(|| self.deliveries[a][mode.index()] as f64 / n as f64)
    }
}

fn max_stage_cost(mdp: &BeliefMdp) -> f64 {
    mdp.actions()
        .iter()
        .map(|act| {
            if act.terminal {
                act.cost
            } else {
                mdp.holding().max_cost() + act.cost
            }
        })
        .fold(0.0, f64::max)
}

/// `n_runs` independent episodes, one seed stream per replication.
pub fn run_batch(mdp: &BeliefMdp, policy: &Policy, gamma: f64, cfg: &SimConfig) -> Result<SimStats> {
    cfg.validate()?;
    policy.check(mdp)?;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("gamma = {gamma} must lie in (0, 1)")));
    }
    let n_actions = mdp.actions().len();
    let summaries: Vec<EpisodeSummary> = (0..cfg.n_runs as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = replication_rng(cfg.seed, i);
            summarize(&run_episode(mdp, policy, gamma, cfg.horizon, &mut rng), n_actions)
        })
        .collect();

    let n = summaries.len() as f64;
    let costs: Vec<f64> = summaries.iter().map(|s| s.cost).collect();
    let mean = pairwise_sum(&costs) / n;
    let sq: Vec<f64> = costs.iter().map(|c| (c - mean) * (c - mean)).collect();
    let std_dev = if summaries.len() > 1 {
        (pairwise_sum(&sq) / (n - 1.0)).sqrt()
    } else {
        0.0
    };

    let mut hist = std::collections::BTreeMap::new();
    let mut never_stopped = 0;
    let mut mode_steps = [0u64; 2];
    let mut transmissions = vec![[0u64; 2]; n_actions];
    let mut deliveries = vec![[0u64; 2]; n_actions];
    for s in &summaries {
        match s.stop_time {
            Some(t) => *hist.entry(t).or_insert(0u64) += 1,
            None => never_stopped += 1,
        }
        for m in 0..2 {
            mode_steps[m] += s.mode_steps[m];
            for a in 0..n_actions {
                transmissions[a][m] += s.transmissions[a][m];
                deliveries[a][m] += s.deliveries[a][m];
            }
        }
    }
    let total_steps = (mode_steps[0] + mode_steps[1]).max(1) as f64;

    Ok(SimStats {
        policy: policy.name(),
        n_runs: cfg.n_runs,
        horizon: cfg.horizon,
        gamma,
        seed: cfg.seed,
        mean_cost: mean,
        std_dev,
        std_error: std_dev / n.sqrt(),
        truncation_bias_bound: gamma.powi(cfg.horizon.min(i32::MAX as usize) as i32) * max_stage_cost(mdp)
            / (1.0 - gamma),
        stop_histogram: hist.into_iter().collect(),
        never_stopped,
        mode_occupancy: [mode_steps[0] as f64 / total_steps, mode_steps[1] as f64 / total_steps],
        transmissions,
        deliveries,
    })
}

/// Traces of the first `count` replications of a batch, same seeds.
pub fn batch_traces(mdp: &BeliefMdp, policy: &Policy, gamma: f64, cfg: &SimConfig, count: usize) -> Vec<SimTrace> {
    (0..count.min(cfg.n_runs) as u64)
        .map(|i| run_episode(mdp, policy, gamma, cfg.horizon, &mut replication_rng(cfg.seed, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::Action;
    use crate::lti::{holding_cost_table, steady_state_covariance, HoldingCostTable, LtiSystem};

    fn holding() -> HoldingCostTable {
        let sys = LtiSystem::scalar(0.85, 1.0, 0.3, 0.3).unwrap();
        let ss = steady_state_covariance(&sys, 1e-12, 1_000_000).unwrap();
        holding_cost_table(&sys, &ss.pbar, 60).unwrap()
    }

    fn mdp(ch: ChannelModel) -> BeliefMdp {
        BeliefMdp::new(ch, holding(), vec![Action::transmit(0.0), Action::stop(10.0)]).unwrap()
    }

    fn reference() -> BeliefMdp {
        mdp(ChannelModel::gilbert_elliott(0.9, 1.0, 0.9, 0.2, 0.0).unwrap())
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs of SplitMix64 seeded with 1234567 (published
        // reference sequence).
        assert_eq!(replication_seed(1234567, 0), 6457827717110365317);
        assert_eq!(replication_seed(1234567, 1), 3203168211198807973);
    }

    #[test]
    fn perfect_channel_keeps_tau_zero() {
        let m = mdp(ChannelModel::gilbert_elliott(1.0, 1.0, 1.0, 1.0, 0.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = run_episode(&m, &Policy::NeverStop, 0.95, 50, &mut rng);
        assert!(tr.steps.iter().all(|s| s.tau == 0));
        let expected: f64 = (0..50).map(|t| 0.95f64.powi(t) * m.holding().cost(0)).sum();
        assert!((tr.discounted_cost - expected).abs() < 1e-12);
        assert!(validate_belief_consistency(&tr, m.channel()));
    }

    #[test]
    fn dead_channel_counts_up() {
        let m = mdp(ChannelModel::gilbert_elliott(0.9, 1.0, 0.0, 0.0, 0.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tr = run_episode(&m, &Policy::NeverStop, 0.95, 30, &mut rng);
        for (t, s) in tr.steps.iter().enumerate() {
            assert_eq!(s.tau, t);
        }
        assert!(validate_belief_consistency(&tr, m.channel()));
    }

    #[test]
    fn stop_now_costs_c_stop() {
        let stats = run_batch(
            &reference(),
            &Policy::StopNow,
            0.95,
            &SimConfig {
                horizon: 200,
                n_runs: 100,
                seed: 5,
            },
        )
        .unwrap();
        assert_eq!(stats.mean_cost, 10.0);
        assert_eq!(stats.std_error, 0.0);
        assert_eq!(stats.stop_histogram, vec![(0, 100)]);
    }

    #[test]
    fn horizon_one_is_first_stage_cost() {
        let m = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tr = run_episode(&m, &Policy::NeverStop, 0.95, 1, &mut rng);
        assert_eq!(tr.discounted_cost, m.holding().cost(0));
    }

    #[test]
    fn corrupted_belief_is_caught() {
        let m = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tr = run_episode(&m, &Policy::NeverStop, 0.95, 40, &mut rng);
        assert!(validate_belief_consistency(&tr, m.channel()));
        tr.steps[17].belief = f64::from_bits(tr.steps[17].belief.to_bits() ^ 1);
        assert_eq!(first_inconsistency(&tr, m.channel()), Some(17));
    }

    #[test]
    fn persistent_failures_raise_belief() {
        let m = mdp(ChannelModel::persistent_failure(0.05, 0.9, 0.2, 0.0).unwrap());
        for seed in 0..50 {
            let tr = run_episode(&m, &Policy::NeverStop, 0.95, 100, &mut ChaCha8Rng::seed_from_u64(seed));
            for w in tr.steps.windows(2) {
                if w[1].delivered == Some(false) {
                    assert!(w[1].belief >= w[0].belief);
                }
            }
        }
    }

    #[test]
    fn batch_is_reproducible_and_success_rates_match() {
        let cfg = SimConfig {
            horizon: 200,
            n_runs: 2000,
            seed: 77,
        };
        let a = run_batch(&reference(), &Policy::NeverStop, 0.95, &cfg).unwrap();
        let b = run_batch(&reference(), &Policy::NeverStop, 0.95, &cfg).unwrap();
        assert_eq!(a, b);
        for (mode, lam) in [(Mode::Favorable, 0.9), (Mode::Unfavorable, 0.2)] {
            let n = a.transmissions[0][mode.index()] as f64;
            let p = a.success_rate(0, mode).unwrap();
            let sigma = (lam * (1.0 - lam) / n).sqrt();
            assert!((p - lam).abs() <= 3.0 * sigma, "{mode:?}: {p} vs {lam}");
        }
        assert!((a.mode_occupancy[0] + a.mode_occupancy[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standard_error_scales_with_runs() {
        let run = |n| {
            run_batch(
                &reference(),
                &Policy::NeverStop,
                0.95,
                &SimConfig {
                    horizon: 100,
                    n_runs: n,
                    seed: 9,
                },
            )
            .unwrap()
            .std_error
        };
        let ratio = run(1000) / run(4000);
        assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("never-stop".parse::<Policy>().unwrap(), Policy::NeverStop);
        assert_eq!("stop-now".parse::<Policy>().unwrap(), Policy::StopNow);
        assert_eq!("threshold:0.5".parse::<Policy>().unwrap(), Policy::FixedThreshold(0.5));
        assert!("threshold:2".parse::<Policy>().is_err());
        assert!("always".parse::<Policy>().is_err());
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_inputs() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 5050.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
