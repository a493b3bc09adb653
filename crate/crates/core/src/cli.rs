//! Command-line front end: `solve`, `verify`, `simulate` and `thresholds`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::belief::{
    check_m_stage_contraction, value_iterate, verify_lemma6, verify_theorem1, BeliefMdp, Solution,
};
use crate::channel::{check_assumption1, Mode};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::folding::{demo_non_tp2_ph, verify_lemma5, verify_prop3};
use crate::lti::{
    check_assumption2, holding_cost_table, steady_state_covariance, HoldingCostTable, LtiSystem,
    DEFAULT_FIXED_POINT_TOL, DEFAULT_MAX_ITER,
};
use crate::output::{self, fmt_g12};
use crate::sim::{batch_traces, run_batch, Policy};
use crate::stopping::{
    extract_threshold, solve_stopping, submodular_by_slices, verify_submodularity, verify_theorem2, StoppingProblem,
    ThresholdFunction,
};

/// Exit codes.
pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_CONVERGENCE: u8 = 3;
pub const EXIT_VERIFICATION: u8 = 4;

/// Seeds of the randomized verification sweeps.
const BELIEF_PAIRS_SEED: u64 = 6;
const BELIEF_RANDOM_PAIRS: usize = 10_000;
const CONTRACTION_SEED: u64 = 8;
const CONTRACTION_TRIALS: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "remote-sched", version, about = "Belief-MDP transmission scheduling over a hidden-mode channel")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve by value iteration and write Q, value/policy and threshold CSVs.
    Solve(Common),
    /// Run the structural verification battery.
    Verify(Common),
    /// Monte Carlo evaluation of a policy.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// solved | never-stop | stop-now | threshold:<c>
        #[arg(long, default_value = "solved")]
        policy: String,
        /// Overrides `sim.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve the stopping problem and print `b_th(τ)`.
    Thresholds(Common),
}

/// Plant-derived quantities plus the MDP.
pub struct Model {
    pub config: RunConfig,
    pub system: LtiSystem,
    pub pbar: f64,
    pub holding: HoldingCostTable,
    pub mdp: BeliefMdp,
}

impl Model {
    pub fn build(config: RunConfig) -> Result<Self> {
        let system = config.system()?;
        let ss = steady_state_covariance(&system, DEFAULT_FIXED_POINT_TOL, DEFAULT_MAX_ITER)?;
        let holding = holding_cost_table(&system, &ss.pbar, config.solver.tau_max)?;
        let mdp = BeliefMdp::new(config.channel_model()?, holding.clone(), config.actions()?)
            .map_err(|e| Error::Config(format!("costs: {e}")))?;
        Ok(Self {
            pbar: ss.pbar.trace(),
            system,
            holding,
            mdp,
            config,
        })
    }

    pub fn stopping_problem(&self) -> Result<StoppingProblem> {
        let c_stop = match self.config.costs.c_stop {
            Some(c) if self.config.is_stopping() => c,
            _ => {
                return Err(Error::Config(
                    "costs: a stopping problem needs action_costs = [0.0] and c_stop".into(),
                ))
            }
        };
        StoppingProblem::new(
            self.mdp.channel().clone(),
            self.holding.clone(),
            self.config.solver.clone(),
            c_stop,
        )
    }

    /// Stopping problems go through the stop-on-tie solver.
    pub fn solve(&self) -> Result<Solution> {
        if self.config.is_stopping() {
            solve_stopping(&self.stopping_problem()?)
        } else {
            value_iterate(&self.mdp, &self.config.solver)
        }
    }

    fn n_transmit(&self) -> usize {
        self.mdp.actions().iter().filter(|a| !a.terminal).count()
    }
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output.directory.clone())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::ConvergenceFailure { .. } => EXIT_CONVERGENCE,
        Error::StructureViolation { .. } => EXIT_VERIFICATION,
        _ => EXIT_OTHER,
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> ExitCode {
    let quiet = cli.quiet;
    let result = match cli.command {
        Command::Solve(c) => cmd_solve(&c, quiet),
        Command::Verify(c) => cmd_verify(&c, quiet),
        Command::Simulate { common, policy, seed } => cmd_simulate(&common, &policy, seed, quiet),
        Command::Thresholds(c) => cmd_thresholds(&c, quiet),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[derive(Debug, Serialize)]
struct SolveSummary {
    pbar_trace: f64,
    spectral_radius: f64,
    gamma: f64,
    tau_max: usize,
    grid_n: usize,
    n_actions: usize,
    stopping: bool,
    sweeps_used: usize,
    final_residual: f64,
}

pub fn cmd_solve(common: &Common, quiet: bool) -> Result<u8> {
    let model = Model::build(RunConfig::load(&common.config)?)?;
    let dir = out_dir(common, &model.config);
    output::ensure_dir(&dir)?;
    let sol = model.solve()?;
    output::write_q_values(&sol, &dir.join(output::Q_VALUES_CSV))?;
    output::write_value_policy(&sol, &dir.join(output::VALUE_POLICY_CSV))?;
    if model.config.is_stopping() {
        output::write_thresholds(&extract_threshold(&sol)?, &dir.join(output::THRESHOLDS_CSV))?;
    }
    let g = sol.grid();
    let summary = SolveSummary {
        pbar_trace: model.pbar,
        spectral_radius: model.system.spectral_radius(),
        gamma: model.config.solver.gamma,
        tau_max: g.tau_max,
        grid_n: g.grid_n,
        n_actions: g.n_actions,
        stopping: model.config.is_stopping(),
        sweeps_used: sol.sweeps_used,
        final_residual: sol.final_residual,
    };
    output::write_json(&summary, &dir.join(output::SOLVE_SUMMARY_JSON))?;
    if !quiet {
        println!(
            "converged in {} sweeps, residual {:e}; wrote {}",
            sol.sweeps_used,
            sol.final_residual,
            dir.display()
        );
    }
    Ok(EXIT_OK)
}

pub fn cmd_thresholds(common: &Common, quiet: bool) -> Result<u8> {
    let model = Model::build(RunConfig::load(&common.config)?)?;
    let th = extract_threshold(&solve_stopping(&model.stopping_problem()?)?)?;
    let dir = out_dir(common, &model.config);
    output::ensure_dir(&dir)?;
    output::write_thresholds(&th, &dir.join(output::THRESHOLDS_CSV))?;
    if !quiet {
        print_thresholds(&th);
    }
    Ok(EXIT_OK)
}

fn print_thresholds(th: &ThresholdFunction) {
    println!("tau  b_th");
    for (tau, t) in th.thresholds.iter().enumerate() {
        println!("{tau:>3}  {}", if t.is_sentinel() { "never".to_string() } else { fmt_g12(t.value()) });
    }
}

#[derive(Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: Value,
}

fn check(name: &str, passed: bool, detail: impl Serialize) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail: serde_json::to_value(detail).unwrap_or(Value::Null),
    }
}

/// The full battery. Checks that need a solution are skipped (and fail)
/// when value iteration does not converge.
pub fn verification_battery(model: &Model) -> Result<Vec<CheckResult>> {
    let ch = model.mdp.channel();
    let cfg = &model.config.solver;
    let n_tx = model.n_transmit();
    let mut out = Vec::new();

    let a1 = check_assumption1(ch);
    out.push(check("mode_kernel_tp2", a1.holds(), a1.witness()));
    let a2 = check_assumption2(&model.system, ch);
    out.push(check("success_bound_holds", a2.holds, &a2));

    let costs = model.holding.costs();
    let drops: Vec<usize> = (0..costs.len() - 1).filter(|&t| costs[t + 1] < costs[t]).collect();
    out.push(check("holding_cost_nondecreasing", drops.is_empty(), &drops));

    let p3 = verify_prop3(ch, cfg.tau_max, n_tx);
    out.push(check("folded_kernel_identity", p3.identical, &p3));
    let l5 = verify_lemma5(ch, cfg.tau_max, n_tx);
    out.push(check("folded_kernels_tp2", l5.all_hold(), &l5));

    let lam = ch.lambda(Mode::Favorable, 0);
    let demo = demo_non_tp2_ph(lam)?;
    let expect_witness = lam > 0.0 && lam < 1.0;
    out.push(check("unfolded_holding_kernel_not_tp2", demo.witness.is_some() == expect_witness, demo));

    let l6 = verify_lemma6(ch, cfg, n_tx, BELIEF_RANDOM_PAIRS, BELIEF_PAIRS_SEED)?;
    out.push(check("belief_update_monotone", l6.holds(), &l6));

    match model.solve() {
        Ok(sol) => {
            let t1 = verify_theorem1(&sol);
            out.push(check("value_monotone", t1.holds(), &t1));
            if model.config.is_stopping() {
                match extract_threshold(&sol) {
                    Ok(th) => {
                        let t2 = verify_theorem2(&th);
                        out.push(check("stop_region_upper_interval", true, json!({})));
                        out.push(check("threshold_nonincreasing", t2.holds(), t2.witness()));
                    }
                    Err(e) => out.push(check("stop_region_upper_interval", false, e.to_string())),
                }
                let sub = verify_submodularity(&sol)?;
                out.push(check("delta_q_nonincreasing", sub.holds(), sub.witness()));
                out.push(check("delta_q_submodular_slices", submodular_by_slices(&sol)?, json!({})));
            }
        }
        Err(e) => out.push(check("value_iteration", false, e.to_string())),
    }

    match check_m_stage_contraction(&model.mdp, cfg, CONTRACTION_TRIALS, CONTRACTION_SEED) {
        Ok(rep) => out.push(check("m_stage_contraction", rep.certified() && rep.empirical_ok(), &rep)),
        Err(e) => out.push(check("m_stage_contraction", false, e.to_string())),
    }
    Ok(out)
}

pub fn cmd_verify(common: &Common, quiet: bool) -> Result<u8> {
    let model = Model::build(RunConfig::load(&common.config)?)?;
    let results = verification_battery(&model)?;
    let dir = out_dir(common, &model.config);
    output::ensure_dir(&dir)?;
    output::write_json(&results, &dir.join(output::VERIFY_REPORT_JSON))?;
    let all = results.iter().all(|r| r.passed);
    if !quiet {
        for r in &results {
            println!("{} {}", if r.passed { "PASS" } else { "FAIL" }, r.name);
        }
    }
    for r in results.iter().filter(|r| !r.passed) {
        eprintln!("failed: {} {}", r.name, r.detail);
    }
    Ok(if all { EXIT_OK } else { EXIT_VERIFICATION })
}

/// File-name form of a policy name.
fn policy_slug(name: &str) -> String {
    name.replace(':', "-")
}

pub fn resolve_policy(name: &str, dir: &Path) -> Result<Policy> {
    if name == "solved" {
        let path = dir.join(output::VALUE_POLICY_CSV);
        if !path.exists() {
            return Err(Error::Io(format!("{} not found; run `solve` first", path.display())));
        }
        return Ok(Policy::Solved(output::read_policy_table(&path)?));
    }
    name.parse()
}

pub fn cmd_simulate(common: &Common, policy: &str, seed: Option<u64>, quiet: bool) -> Result<u8> {
    let model = Model::build(RunConfig::load(&common.config)?)?;
    let mut sim = model
        .config
        .sim
        .clone()
        .ok_or_else(|| Error::Config("missing [sim] section".into()))?;
    if let Some(s) = seed {
        sim.seed = s;
    }
    let dir = out_dir(common, &model.config);
    let policy = resolve_policy(policy, &dir)?;
    output::ensure_dir(&dir)?;
    let gamma = model.config.solver.gamma;
    let stats = run_batch(&model.mdp, &policy, gamma, &sim)?;
    let slug = policy_slug(&policy.name());
    output::write_json(&stats, &dir.join(format!("sim_{slug}.json")))?;
    if model.config.output.emit_traces {
        let traces = batch_traces(&model.mdp, &policy, gamma, &sim, output::MAX_TRACES);
        output::write_traces(&traces, &dir.join(format!("traces_{slug}.csv")))?;
    }
    if !quiet {
        println!(
            "{}: mean discounted cost {} (std error {}, truncation bias <= {})",
            stats.policy,
            fmt_g12(stats.mean_cost),
            fmt_g12(stats.std_error),
            fmt_g12(stats.truncation_bias_bound)
        );
    }
    Ok(EXIT_OK)
}
