//! Grid-based Bellman operator and value iteration.
//!
//! The belief axis is discretized to `b_i = i / grid_n`. Continuation values
//! at off-grid posteriors are read by piecewise-linear interpolation of
//! `V(y, ·) = min_a Q(y, ·, a)`; the failure branch `y = τ + 1` is clamped to
//! `τ_max`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::branches;
use crate::channel::ChannelModel;
use crate::error::{Error, Result};
use crate::lti::{success_bound_from_parts, HoldingCostTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Prefer the smallest minimizing action index.
    #[default]
    Lowest,
    /// Prefer the largest minimizing action index.
    Highest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub gamma: f64,
    #[serde(default = "defaults::tau_max")]
    pub tau_max: usize,
    #[serde(default = "defaults::grid_n")]
    pub grid_n: usize,
    #[serde(default = "defaults::vi_tol")]
    pub vi_tol: f64,
    #[serde(default = "defaults::max_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "defaults::epsilon_gelfand")]
    pub epsilon_gelfand: f64,
    #[serde(default)]
    pub tie_break: TieBreak,
}

mod defaults {
    pub fn tau_max() -> usize {
        60
    }
    pub fn grid_n() -> usize {
        200
    }
    pub fn vi_tol() -> f64 {
        1e-9
    }
    pub fn max_sweeps() -> usize {
        100_000
    }
    pub fn epsilon_gelfand() -> f64 {
        0.01
    }
}

impl SolverConfig {
    /// Default solver knobs for the given discount.
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            tau_max: defaults::tau_max(),
            grid_n: defaults::grid_n(),
            vi_tol: defaults::vi_tol(),
            max_sweeps: defaults::max_sweeps(),
            epsilon_gelfand: defaults::epsilon_gelfand(),
            tie_break: TieBreak::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("solver.gamma = {} must lie in (0, 1)", self.gamma)));
        }
        if self.grid_n < 2 {
            return Err(Error::invalid(format!("solver.grid_n = {} must be at least 2", self.grid_n)));
        }
        if self.tau_max < 1 {
            return Err(Error::invalid("solver.tau_max must be at least 1"));
        }
        if !(self.vi_tol > 0.0 && self.vi_tol.is_finite()) {
            return Err(Error::invalid(format!("solver.vi_tol = {} must be positive", self.vi_tol)));
        }
        if self.max_sweeps == 0 {
            return Err(Error::invalid("solver.max_sweeps must be positive"));
        }
        if !(self.epsilon_gelfand > 0.0 && self.epsilon_gelfand.is_finite()) {
            return Err(Error::invalid(format!(
                "solver.epsilon_gelfand = {} must be positive",
                self.epsilon_gelfand
            )));
        }
        Ok(())
    }

    pub fn grid(&self, n_actions: usize) -> Grid {
        Grid {
            tau_max: self.tau_max,
            grid_n: self.grid_n,
            n_actions,
        }
    }
}

/// One control action. Terminal actions end the episode: their Q-value is
/// the action cost with no holding cost or continuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub cost: f64,
    pub terminal: bool,
}

impl Action {
    pub fn transmit(cost: f64) -> Self {
        Self { cost, terminal: false }
    }

    pub fn stop(cost: f64) -> Self {
        Self { cost, terminal: true }
    }
}

/// Channel, holding cost and action set.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefMdp {
    channel: ChannelModel,
    holding: HoldingCostTable,
    actions: Vec<Action>,
}

impl BeliefMdp {
    pub fn new(channel: ChannelModel, holding: HoldingCostTable, actions: Vec<Action>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::invalid("action set is empty"));
        }
        for (a, act) in actions.iter().enumerate() {
            if !(act.cost.is_finite() && act.cost >= 0.0) {
                return Err(Error::invalid(format!("action {a} cost {} must be finite and nonnegative", act.cost)));
            }
            if !act.terminal && !channel.covers_action(a) {
                return Err(Error::invalid(format!("channel has no tables for action {a}")));
            }
        }
        Ok(Self {
            channel,
            holding,
            actions,
        })
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    pub fn holding(&self) -> &HoldingCostTable {
        &self.holding
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    /// `c(τ, b, a)`; independent of `b`.
    pub fn stage_cost(&self, tau: usize, _b: f64, a: usize) -> f64 {
        let act = self.actions[a];
        if act.terminal {
            act.cost
        } else {
            self.holding.cost(tau) + act.cost
        }
    }
}

/// Index layout of the `(τ, i, a)` lattice, row-major with `a` fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Grid {
    pub tau_max: usize,
    pub grid_n: usize,
    pub n_actions: usize,
}

impl Grid {
    pub fn n_beliefs(&self) -> usize {
        self.grid_n + 1
    }

    pub fn n_taus(&self) -> usize {
        self.tau_max + 1
    }

    pub fn belief(&self, i: usize) -> f64 {
        i as f64 / self.grid_n as f64
    }

    pub fn len(&self) -> usize {
        self.n_taus() * self.n_beliefs() * self.n_actions
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, tau: usize, i: usize, a: usize) -> usize {
        (tau * self.n_beliefs() + i) * self.n_actions + a
    }

    fn row_len(&self) -> usize {
        self.n_beliefs() * self.n_actions
    }
}

/// A real function on the `(τ, i, a)` lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeFn {
    grid: Grid,
    values: Vec<f64>,
}

impl LatticeFn {
    pub fn zeros(grid: Grid) -> Self {
        Self::from_fn(grid, |_, _, _| 0.0)
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for tau in 0..grid.n_taus() {
            for i in 0..grid.n_beliefs() {
                for a in 0..grid.n_actions {
                    values.push(f(tau, i, a));
                }
            }
        }
        Self { grid, values }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "lattice needs {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn get(&self, tau: usize, i: usize, a: usize) -> f64 {
        self.values[self.grid.index(tau, i, a)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `min_a Q(τ, i, a)` as a `[τ][i]` table flattened row-major.
    pub fn min_over_actions(&self) -> Vec<f64> {
        self.values
            .chunks_exact(self.grid.n_actions)
            .map(|qs| qs.iter().copied().fold(f64::INFINITY, f64::min))
            .collect()
    }
}

/// `s(τ) = base^{2τ}` with `base = max(1, ρ(A) + ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightFunction {
    base: f64,
}

impl WeightFunction {
    pub fn new(spectral_radius: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon_gelfand = {epsilon} must be positive")));
        }
        Ok(Self {
            base: (spectral_radius + epsilon).max(1.0),
        })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// One-step growth `s(τ + 1) / s(τ)`.
    pub fn step_ratio(&self) -> f64 {
        self.base * self.base
    }

    pub fn s(&self, tau: usize) -> f64 {
        // Exponent capped only to keep `powi` in range; overflow gives +inf.
        self.step_ratio().powi(tau.min(i32::MAX as usize) as i32)
    }
}

/// `sup |f(τ, b, a)| / s(τ)` over the lattice.
pub fn weighted_norm(f: &LatticeFn, weight: &WeightFunction) -> f64 {
    let row = f.grid.row_len();
    f.values
        .chunks_exact(row)
        .enumerate()
        .map(|(tau, vals)| {
            let s = weight.s(tau);
            vals.iter().fold(0.0_f64, |m, v| m.max(v.abs() / s))
        })
        .fold(0.0, f64::max)
}

/// Interpolation read of one observation branch.
#[derive(Debug, Clone, Copy, PartialEq)]
struct BranchRead {
    sigma: f64,
    /// Left grid index.
    cell: usize,
    /// Weight on `cell + 1`; zero for exact grid hits.
    frac: f64,
}

impl BranchRead {
    fn new(sigma: f64, posterior: f64, grid_n: usize) -> Self {
        let pos = posterior * grid_n as f64;
        let cell = pos.floor() as usize;
        if cell >= grid_n {
            Self {
                sigma,
                cell: grid_n,
                frac: 0.0,
            }
        } else {
            Self {
                sigma,
                cell,
                frac: pos - cell as f64,
            }
        }
    }

    fn read(&self, v_row: &[f64]) -> f64 {
        let left = v_row[self.cell];
        if self.frac == 0.0 {
            left
        } else {
            left + self.frac * (v_row[self.cell + 1] - left)
        }
    }
}

/// `𝔗` on a fixed grid, with the τ-independent branch data cached.
#[derive(Debug, Clone)]
pub struct BellmanOperator<'a> {
    mdp: &'a BeliefMdp,
    grid: Grid,
    gamma: f64,
    /// Per `(i, a)`: success and failure reads, `None` for zero-likelihood
    /// branches or terminal actions.
    reads: Vec<[Option<BranchRead>; 2]>,
}

impl<'a> BellmanOperator<'a> {
    pub fn new(mdp: &'a BeliefMdp, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid(mdp.actions.len());
        let mut reads = Vec::with_capacity(grid.row_len());
        for i in 0..grid.n_beliefs() {
            let b = grid.belief(i);
            for (a, act) in mdp.actions.iter().enumerate() {
                if act.terminal {
                    reads.push([None, None]);
                    continue;
                }
                let br = branches(&mdp.channel, b, a);
                reads.push([0, 1].map(|k| br.posterior[k].map(|t| BranchRead::new(br.sigma[k], t, grid.grid_n))));
            }
        }
        Ok(Self {
            mdp,
            grid,
            gamma: cfg.gamma,
            reads,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// One Jacobi sweep. Rows are computed in parallel but each lattice
    /// point reads only `q`, so the result does not depend on scheduling.
    pub fn apply(&self, q: &LatticeFn) -> Result<LatticeFn> {
        if q.grid != self.grid {
            return Err(Error::invalid("Q lattice does not match the operator grid"));
        }
        let v = q.min_over_actions();
        let nb = self.grid.n_beliefs();
        let na = self.grid.n_actions;
        let mut out = vec![0.0; self.grid.len()];
        out.par_chunks_mut(self.grid.row_len()).enumerate().for_each(|(tau, row)| {
            let v_success = &v[..nb];
            let next = (tau + 1).min(self.grid.tau_max);
            let v_failure = &v[next * nb..(next + 1) * nb];
            for (k, slot) in row.iter_mut().enumerate() {
                let a = k % na;
                let stage = self.mdp.stage_cost(tau, 0.0, a);
                let [ok, lost] = &self.reads[k];
                if self.mdp.actions[a].terminal {
                    *slot = stage;
                    continue;
                }
                let mut cont = 0.0;
                if let Some(r) = ok {
                    cont += r.sigma * r.read(v_success);
                }
                if let Some(r) = lost {
                    cont += r.sigma * r.read(v_failure);
                }
                *slot = stage + self.gamma * cont;
            }
        });
        Ok(LatticeFn {
            grid: self.grid,
            values: out,
        })
    }
}

/// Convenience wrapper building the operator for a single application.
pub fn bellman_apply(mdp: &BeliefMdp, cfg: &SolverConfig, q: &LatticeFn) -> Result<LatticeFn> {
    BellmanOperator::new(mdp, cfg)?.apply(q)
}

/// Converged Q-function with its value and greedy policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    q: LatticeFn,
    v: Vec<f64>,
    policy: Vec<usize>,
    actions: Vec<Action>,
    pub sweeps_used: usize,
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
}

impl Solution {
    pub(crate) fn new(
        q: LatticeFn,
        actions: Vec<Action>,
        tie_break: TieBreak,
        sweeps_used: usize,
        residual_history: Vec<f64>,
    ) -> Self {
        let v = q.min_over_actions();
        let policy = q
            .values
            .chunks_exact(q.grid.n_actions)
            .map(|qs| greedy(qs, tie_break))
            .collect();
        Self {
            q,
            v,
            policy,
            actions,
            sweeps_used,
            final_residual: residual_history.last().copied().unwrap_or(f64::NAN),
            residual_history,
        }
    }

    pub fn grid(&self) -> Grid {
        self.q.grid
    }

    pub fn q_function(&self) -> &LatticeFn {
        &self.q
    }

    pub fn q(&self, tau: usize, i: usize, a: usize) -> f64 {
        self.q.get(tau, i, a)
    }

    pub fn v(&self, tau: usize, i: usize) -> f64 {
        self.v[tau * self.grid().n_beliefs() + i]
    }

    pub fn policy(&self, tau: usize, i: usize) -> usize {
        self.policy[tau * self.grid().n_beliefs() + i]
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    /// Value at an arbitrary belief, interpolated on the grid; `τ` saturates.
    pub fn value_at(&self, tau: usize, b: f64) -> f64 {
        let g = self.grid();
        let tau = tau.min(g.tau_max);
        let row = &self.v[tau * g.n_beliefs()..(tau + 1) * g.n_beliefs()];
        BranchRead::new(1.0, b.clamp(0.0, 1.0), g.grid_n).read(row)
    }
}

fn greedy(qs: &[f64], tie_break: TieBreak) -> usize {
    let mut best = 0;
    for (a, &val) in qs.iter().enumerate().skip(1) {
        let better = match tie_break {
            TieBreak::Lowest => val < qs[best],
            TieBreak::Highest => val <= qs[best],
        };
        if better {
            best = a;
        }
    }
    best
}

/// Checks the solver preconditions on `ρ(A)` and `λ̲`.
pub(crate) fn check_preconditions(mdp: &BeliefMdp, cfg: &SolverConfig) -> Result<WeightFunction> {
    cfg.validate()?;
    if mdp.holding.tau_max() < cfg.tau_max {
        return Err(Error::invalid(format!(
            "holding cost table stops at tau = {}, solver needs {}",
            mdp.holding.tau_max(),
            cfg.tau_max
        )));
    }
    let rho = mdp.holding.spectral_radius();
    let lambda_min = mdp.channel.lambda_min();
    let weight = WeightFunction::new(rho, cfg.epsilon_gelfand)?;
    if rho >= 1.0 {
        let a2 = success_bound_from_parts(rho, lambda_min);
        if !a2.holds {
            return Err(Error::Precondition(format!(
                "minimum success probability {lambda_min} does not exceed 1 - 1/rho(A)^2 = {}",
                a2.bound
            )));
        }
        let alpha = (1.0 - lambda_min) * weight.step_ratio();
        if alpha >= 1.0 {
            return Err(Error::Precondition(format!(
                "alpha = (1 - lambda_min)(rho(A) + epsilon)^2 = {alpha} is not below 1"
            )));
        }
    }
    Ok(weight)
}

/// Value iteration from `Q = 0` until the weighted sup-norm step falls below
/// `vi_tol`.
pub fn value_iterate(mdp: &BeliefMdp, cfg: &SolverConfig) -> Result<Solution> {
    let weight = check_preconditions(mdp, cfg)?;
    let op = BellmanOperator::new(mdp, cfg)?;
    let mut q = LatticeFn::zeros(op.grid);
    let mut history = Vec::new();
    for sweep in 1..=cfg.max_sweeps {
        let next = op.apply(&q)?;
        let diff = LatticeFn {
            grid: op.grid,
            values: next.values.iter().zip(&q.values).map(|(x, y)| x - y).collect(),
        };
        let residual = weighted_norm(&diff, &weight);
        history.push(residual);
        q = next;
        if !residual.is_finite() {
            break;
        }
        if residual < cfg.vi_tol {
            log::debug!("value iteration converged after {sweep} sweeps (residual {residual:e})");
            return Ok(Solution::new(q, mdp.actions.clone(), cfg.tie_break, sweep, history));
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: history.len(),
        residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}
