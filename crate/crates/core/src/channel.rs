//! Two-mode hidden Markov channel.
//!
//! Mode 0 is favorable, mode 1 unfavorable. Tables are stored per action;
//! a model with a single table applies it to every action.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::orders::{is_tp2, FiniteDist, KernelMatrix, Tp2Witness, Verdict};

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Mode {
    Favorable = 0,
    Unfavorable = 1,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Favorable, Mode::Unfavorable];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Mode::Favorable),
            1 => Some(Mode::Unfavorable),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    /// `success[a][θ] = λ(θ, a)`.
    success: Vec<[f64; 2]>,
    /// `transition[a][θ][θ'] = P_c(θ' | θ, a)`.
    transition: Vec<[[f64; 2]; 2]>,
    initial_mode: FiniteDist,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

impl ChannelModel {
    /// General per-action tables. Either one table (shared by all actions)
    /// or one per action.
    pub fn explicit(success: Vec<[f64; 2]>, transition: Vec<[[f64; 2]; 2]>, b0: f64) -> Result<Self> {
        if success.is_empty() || success.len() != transition.len() {
            return Err(Error::invalid(format!(
                "success and transition tables need the same non-zero number of actions ({} vs {})",
                success.len(),
                transition.len()
            )));
        }
        for (a, lam) in success.iter().enumerate() {
            check_prob(&format!("lambda(0, {a})"), lam[0])?;
            check_prob(&format!("lambda(1, {a})"), lam[1])?;
            if lam[0] < lam[1] {
                return Err(Error::invalid(format!(
                    "lambda(0, {a}) = {} must be at least lambda(1, {a}) = {}",
                    lam[0], lam[1]
                )));
            }
        }
        for (a, pc) in transition.iter().enumerate() {
            for (theta, row) in pc.iter().enumerate() {
                check_prob(&format!("P_c(0|{theta}, {a})"), row[0])?;
                check_prob(&format!("P_c(1|{theta}, {a})"), row[1])?;
                if (row[0] + row[1] - 1.0).abs() > ROW_TOL {
                    return Err(Error::invalid(format!("P_c(.|{theta}, {a}) does not sum to 1")));
                }
            }
        }
        check_prob("b0", b0)?;
        let initial_mode = FiniteDist::new(vec![1.0 - b0, b0])?;
        Ok(Self {
            success,
            transition,
            initial_mode,
        })
    }

    /// Action-independent Gilbert–Elliott channel with
    /// `P_c = [[p00, 1 − p00], [1 − p11, p11]]`.
    pub fn gilbert_elliott(p00: f64, p11: f64, lambda0: f64, lambda1: f64, b0: f64) -> Result<Self> {
        check_prob("p00", p00)?;
        check_prob("p11", p11)?;
        if p00 + p11 < 1.0 {
            log::warn!("p00 + p11 = {} < 1: mode kernel is not TP2", p00 + p11);
        }
        Self::explicit(vec![[lambda0, lambda1]], vec![[[p00, 1.0 - p00], [1.0 - p11, p11]]], b0)
    }

    /// Mode 1 is absorbing; mode 0 fails with probability `p_fail` per step.
    pub fn persistent_failure(p_fail: f64, lambda0: f64, lambda1: f64, b0: f64) -> Result<Self> {
        check_prob("p_fail", p_fail)?;
        Self::explicit(vec![[lambda0, lambda1]], vec![[[1.0 - p_fail, p_fail], [0.0, 1.0]]], b0)
    }

    /// Number of stored tables: 1 for action-independent channels.
    pub fn table_count(&self) -> usize {
        self.success.len()
    }

    pub fn is_action_independent(&self) -> bool {
        self.success.len() == 1
    }

    /// Whether the tables define behavior for action `a`.
    pub fn covers_action(&self, a: usize) -> bool {
        self.is_action_independent() || a < self.success.len()
    }

    fn table(&self, a: usize) -> usize {
        if self.is_action_independent() {
            0
        } else {
            assert!(a < self.success.len(), "action {a} has no channel table");
            a
        }
    }

    /// `λ(θ, a)`.
    pub fn lambda(&self, theta: Mode, a: usize) -> f64 {
        self.success[self.table(a)][theta.index()]
    }

    /// `P_c(θ' | θ, a)`.
    pub fn transition_prob(&self, next: Mode, theta: Mode, a: usize) -> f64 {
        self.transition[self.table(a)][theta.index()][next.index()]
    }

    pub fn transition_kernel(&self, a: usize) -> KernelMatrix {
        let pc = &self.transition[self.table(a)];
        KernelMatrix::stochastic(DMatrix::from_fn(2, 2, |i, j| pc[i][j])).expect("validated at construction")
    }

    /// `λ̲ = min_{θ,a} λ(θ, a)`.
    pub fn lambda_min(&self) -> f64 {
        self.success
            .iter()
            .flat_map(|lam| lam.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn initial_mode(&self) -> &FiniteDist {
        &self.initial_mode
    }

    /// Initial belief `b_0 = p_c(1)`.
    pub fn b0(&self) -> f64 {
        self.initial_mode.prob(1)
    }

    pub fn success_table(&self) -> &[[f64; 2]] {
        &self.success
    }

    pub fn transition_table(&self) -> &[[[f64; 2]; 2]] {
        &self.transition
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeKernelWitness {
    /// Table index whose mode kernel fails TP2.
    pub action: usize,
    pub minor: Tp2Witness,
}

/// Mode transition kernel is TP2 in `(θ, θ')` for every action table.
pub fn check_assumption1(ch: &ChannelModel) -> Verdict<ModeKernelWitness> {
    for a in 0..ch.table_count() {
        if let Verdict::Violated(minor) = is_tp2(&ch.transition_kernel(a)) {
            return Verdict::Violated(ModeKernelWitness { action: a, minor });
        }
    }
    Verdict::Holds
}

/// Draws `θ' ~ P_c(· | θ, a)` from one uniform variate.
pub fn sample_mode_step(ch: &ChannelModel, theta: Mode, a: usize, rng: &mut impl Rng) -> Mode {
    let u: f64 = rng.random();
    if u < ch.transition_prob(Mode::Favorable, theta, a) {
        Mode::Favorable
    } else {
        Mode::Unfavorable
    }
}

/// Draws `θ_0 ~ p_c` from one uniform variate.
pub fn sample_initial_mode(ch: &ChannelModel, rng: &mut impl Rng) -> Mode {
    let u: f64 = rng.random();
    if u < ch.initial_mode.prob(0) {
        Mode::Favorable
    } else {
        Mode::Unfavorable
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reference() -> ChannelModel {
        ChannelModel::gilbert_elliott(0.9, 1.0, 0.9, 0.2, 0.0).unwrap()
    }

    #[test]
    fn gilbert_elliott_reference_instance() {
        let ch = reference();
        assert_eq!(ch.lambda(Mode::Favorable, 0), 0.9);
        assert_eq!(ch.lambda(Mode::Unfavorable, 5), 0.2);
        assert_eq!(ch.transition_prob(Mode::Unfavorable, Mode::Favorable, 0), 1.0 - 0.9);
        assert_eq!(ch.transition_prob(Mode::Unfavorable, Mode::Unfavorable, 1), 1.0);
        assert_eq!(ch.lambda_min(), 0.2);
        assert_eq!(ch.b0(), 0.0);
        assert!(check_assumption1(&ch).holds());
    }

    #[test]
    fn frozen_and_indistinguishable_modes() {
        let frozen = ChannelModel::gilbert_elliott(1.0, 1.0, 0.7, 0.7, 0.3).unwrap();
        assert!(frozen.transition_kernel(0).entries().is_identity(0.0));
        assert!(check_assumption1(&frozen).holds());
    }

    #[test]
    fn constructors_reject_bad_parameters() {
        assert!(ChannelModel::gilbert_elliott(1.2, 1.0, 0.9, 0.2, 0.0).is_err());
        assert!(ChannelModel::gilbert_elliott(0.9, 1.0, 0.2, 0.9, 0.0).is_err());
        assert!(ChannelModel::gilbert_elliott(0.9, 1.0, 0.9, 0.2, 1.5).is_err());
        assert!(ChannelModel::persistent_failure(-0.1, 0.9, 0.2, 0.0).is_err());
        assert!(ChannelModel::explicit(vec![[0.9, 0.2]], vec![[[0.5, 0.4], [0.0, 1.0]]], 0.0).is_err());
        assert!(ChannelModel::explicit(vec![[0.9, 0.2]; 2], vec![[[1.0, 0.0], [0.0, 1.0]]], 0.0).is_err());
    }

    #[test]
    fn persistent_failure_rows() {
        for p in [0.0, 0.1, 1.0] {
            let ch = ChannelModel::persistent_failure(p, 0.9, 0.2, 0.0).unwrap();
            assert_eq!(ch.transition_prob(Mode::Favorable, Mode::Unfavorable, 0), 0.0);
            assert_eq!(ch.transition_prob(Mode::Unfavorable, Mode::Unfavorable, 0), 1.0);
            assert_eq!(ch.transition_prob(Mode::Unfavorable, Mode::Favorable, 0), p);
            assert!(check_assumption1(&ch).holds());
        }
        // Same kernel as the reference GE instance.
        let pf = ChannelModel::persistent_failure(0.1, 0.9, 0.2, 0.0).unwrap();
        for (x, y) in pf.transition_table()[0].iter().flatten().zip(reference().transition_table()[0].iter().flatten()) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn non_tp2_mode_kernel_counterexample() {
        let ch = ChannelModel::explicit(vec![[0.9, 0.2]], vec![[[0.4, 0.6], [0.7, 0.3]]], 0.0).unwrap();
        let w = *check_assumption1(&ch).witness().unwrap();
        assert_eq!(w.action, 0);
        assert_eq!((w.minor.lower, w.minor.upper), ((0, 0), (1, 1)));
        assert!((w.minor.minor - (0.12 - 0.42)).abs() < 1e-15);
    }

    #[test]
    fn per_action_tables() {
        let ch = ChannelModel::explicit(
            vec![[0.9, 0.2], [0.99, 0.5]],
            vec![[[0.9, 0.1], [0.0, 1.0]], [[0.95, 0.05], [0.1, 0.9]]],
            0.2,
        )
        .unwrap();
        assert_eq!(ch.lambda(Mode::Unfavorable, 1), 0.5);
        assert!(ch.covers_action(1));
        assert!(!ch.covers_action(2));
        assert_eq!(ch.lambda_min(), 0.2);
    }

    #[test]
    fn sampling_deterministic_row() {
        let ch = ChannelModel::persistent_failure(1.0, 0.9, 0.2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(sample_mode_step(&ch, Mode::Favorable, 0, &mut rng), Mode::Unfavorable);
            assert_eq!(sample_mode_step(&ch, Mode::Unfavorable, 0, &mut rng), Mode::Unfavorable);
        }
    }

    #[test]
    fn sampling_frequency_within_three_sigma() {
        let ch = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_mode_step(&ch, Mode::Favorable, 0, &mut rng) == Mode::Unfavorable)
            .count();
        let p = 0.1;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((hits as f64 - n as f64 * p).abs() < 3.0 * sigma, "hits = {hits}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let ch = ChannelModel::gilbert_elliott(0.6, 0.7, 0.9, 0.2, 0.5).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = Mode::Favorable;
            (0..200)
                .map(|_| {
                    m = sample_mode_step(&ch, m, 0, &mut rng);
                    m
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(99), draw(99));
        assert_ne!(draw(99), draw(100));
    }
}
