//! TOML run configuration.
//!
//! ```toml
//! [system]
//! A = 0.85            # scalar or nested rows, e.g. [[1.0, 0.1], [0.0, 1.0]]
//! C = 1.0
//! Q = 0.3
//! R = 0.3
//!
//! [channel]
//! type = "ge"         # ge | persistent | explicit
//! p00 = 0.9
//! p11 = 1.0
//! lambda0 = 0.9
//! lambda1 = 0.2
//! b0 = 0.0
//!
//! [costs]
//! action_costs = [0.0]
//! c_stop = 10.0       # optional; adds a terminal stop action
//!
//! [solver]
//! gamma = 0.95
//!
//! [sim]
//! horizon = 200
//! n_runs = 10000
//! seed = 1
//!
//! [output]
//! directory = "out"
//! emit_traces = false
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::belief::{Action, SolverConfig};
use crate::channel::ChannelModel;
use crate::error::{Error, Result};
use crate::lti::LtiSystem;
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn to_matrix(&self, field: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Scalar(x) => Ok(DMatrix::from_element(1, 1, *x)),
            MatrixSpec::Rows(rows) => {
                let ncols = rows.first().map_or(0, Vec::len);
                if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
                    return Err(Error::Config(format!("{field} must be a non-empty rectangular array")));
                }
                Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(rename = "A")]
    pub a: MatrixSpec,
    #[serde(rename = "C")]
    pub c: MatrixSpec,
    #[serde(rename = "Q")]
    pub q: MatrixSpec,
    #[serde(rename = "R")]
    pub r: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSection {
    Ge {
        p00: f64,
        p11: f64,
        lambda0: f64,
        lambda1: f64,
        b0: f64,
    },
    Persistent {
        p_fail: f64,
        lambda0: f64,
        lambda1: f64,
        b0: f64,
    },
    /// `success[a] = [λ(0,a), λ(1,a)]`, `transition[a][θ][θ']`.
    Explicit {
        success: Vec<[f64; 2]>,
        transition: Vec<[[f64; 2]; 2]>,
        b0: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsSection {
    pub action_costs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_stop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default)]
    pub emit_traces: bool,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            emit_traces: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    pub channel: ChannelSection,
    pub costs: CostsSection,
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub output: OutputSection,
}

fn ctx(field: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config(m) => Error::Config(m),
        Error::InvalidArgument(m) | Error::Precondition(m) => Error::Config(format!("{field}: {m}")),
        other => Error::Config(format!("{field}: {other}")),
    }
}

impl RunConfig {
    /// Parses and validates; every error is [`Error::Config`].
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let sys = self.system()?;
        self.channel_model()?;
        let acts = self.actions()?;
        self.solver.validate().map_err(ctx("solver"))?;
        if let Some(sim) = &self.sim {
            sim.validate().map_err(ctx("sim"))?;
        }
        let ch = self.channel_model()?;
        let transmit = acts.iter().filter(|a| !a.terminal).count();
        if !ch.is_action_independent() && ch.table_count() != transmit {
            return Err(Error::Config(format!(
                "channel: {} tables for {transmit} entries in costs.action_costs",
                ch.table_count()
            )));
        }
        if sys.spectral_radius() >= 1.0 {
            log::info!("unstable plant: rho(A) = {}", sys.spectral_radius());
        }
        Ok(())
    }

    pub fn system(&self) -> Result<LtiSystem> {
        let s = &self.system;
        LtiSystem::new(
            s.a.to_matrix("system.A")?,
            s.c.to_matrix("system.C")?,
            s.q.to_matrix("system.Q")?,
            s.r.to_matrix("system.R")?,
        )
        .map_err(ctx("system"))
    }

    pub fn channel_model(&self) -> Result<ChannelModel> {
        match &self.channel {
            ChannelSection::Ge {
                p00,
                p11,
                lambda0,
                lambda1,
                b0,
            } => ChannelModel::gilbert_elliott(*p00, *p11, *lambda0, *lambda1, *b0),
            ChannelSection::Persistent {
                p_fail,
                lambda0,
                lambda1,
                b0,
            } => ChannelModel::persistent_failure(*p_fail, *lambda0, *lambda1, *b0),
            ChannelSection::Explicit { success, transition, b0 } => {
                ChannelModel::explicit(success.clone(), transition.clone(), *b0)
            }
        }
        .map_err(ctx("channel"))
    }

    /// Transmit actions in `action_costs` order, then stop if `c_stop` is set.
    pub fn actions(&self) -> Result<Vec<Action>> {
        let c = &self.costs;
        if c.action_costs.is_empty() {
            return Err(Error::Config("costs.action_costs must list at least one action".into()));
        }
        for (a, cost) in c.action_costs.iter().enumerate() {
            if !(cost.is_finite() && *cost >= 0.0) {
                return Err(Error::Config(format!("costs.action_costs[{a}] = {cost} must be finite and nonnegative")));
            }
        }
        let mut acts: Vec<Action> = c.action_costs.iter().map(|&x| Action::transmit(x)).collect();
        if let Some(stop) = c.c_stop {
            if !(stop.is_finite() && stop >= 0.0) {
                return Err(Error::Config(format!("costs.c_stop = {stop} must be finite and nonnegative")));
            }
            acts.push(Action::stop(stop));
        }
        Ok(acts)
    }

    /// Exactly one free transmit action plus stop.
    pub fn is_stopping(&self) -> bool {
        self.costs.c_stop.is_some() && self.costs.action_costs == [0.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE: &str = include_str!("../../../configs/reference.toml");

    #[test]
    fn reference_config_loads() {
        let cfg = RunConfig::from_toml_str(REFERENCE).unwrap();
        assert!(cfg.is_stopping());
        assert_eq!(cfg.solver.gamma, 0.95);
        assert_eq!(cfg.solver.grid_n, 200);
        let sys = cfg.system().unwrap();
        assert_eq!(sys.a()[(0, 0)], 0.85);
        let ch = cfg.channel_model().unwrap();
        assert_eq!(ch.lambda(crate::channel::Mode::Unfavorable, 0), 0.2);
        assert_eq!(cfg.actions().unwrap(), vec![Action::transmit(0.0), Action::stop(10.0)]);
    }

    #[test]
    fn round_trip_is_value_identical() {
        let cfg = RunConfig::from_toml_str(REFERENCE).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn matrix_rows_round_trip() {
        let text = REFERENCE.replace("A = 0.85", "A = [[0.85]]");
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.system.a, MatrixSpec::Rows(vec![vec![0.85]]));
        let again = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    fn config_error(text: &str) -> String {
        match RunConfig::from_toml_str(text) {
            Err(Error::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_gamma_names_field() {
        let m = config_error(&REFERENCE.replace("gamma = 0.95", "gamma = 1.5"));
        assert!(m.contains("solver.gamma"), "{m}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let m = config_error(&REFERENCE.replace("[solver]", "[solver]\nspeed = 3"));
        assert!(m.contains("speed"), "{m}");
        let m = config_error(&REFERENCE.replace("p00 = 0.9", "p00 = 0.9\nq = 1"));
        assert!(m.contains('q'), "{m}");
    }

    #[test]
    fn swapped_success_probabilities_rejected() {
        let m = config_error(&REFERENCE.replace("lambda1 = 0.2", "lambda1 = 0.95"));
        assert!(m.contains("channel") && m.contains("lambda"), "{m}");
    }

    #[test]
    fn parse_errors_report_position() {
        let m = config_error("[system\nA = 1");
        assert!(m.contains("line"), "{m}");
    }

    #[test]
    fn missing_physics_is_an_error() {
        let m = config_error(&REFERENCE.replace("R = 0.3\n", ""));
        assert!(m.contains('R'), "{m}");
    }
}
