//! Local Kalman steady state and the holding-time-indexed remote error cost.
//!
//! The local estimator runs at its steady-state covariance `P̄`, the fixed
//! point of `g̃ ∘ h` where
//!
//! ```text
//! h(X)  = A X Aᵀ + Q
//! g̃(X) = X − X Cᵀ (C X Cᵀ + R)⁻¹ C X
//! ```
//!
//! After `τ` consecutive packet losses the remote covariance is `h^τ(P̄)`,
//! so the estimation cost is `c_s(τ) = tr(h^τ(P̄))`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::channel::ChannelModel;
use crate::error::{Error, Result};

pub const DEFAULT_FIXED_POINT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;

const RANK_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-12;

/// Linear time-invariant plant `x⁺ = A x + w`, `y = C x + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl LtiSystem {
    /// Validates shapes, `Q ⪰ 0` and `R ≻ 0`. Loss of observability of
    /// `(A, C)` or controllability of `(A, √Q)` is logged, not rejected.
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::invalid(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
        }
        let m = c.nrows();
        if m == 0 || c.ncols() != n {
            return Err(Error::invalid(format!("C must be m x {n}, got {}x{}", c.nrows(), c.ncols())));
        }
        if q.shape() != (n, n) {
            return Err(Error::invalid(format!("Q must be {n}x{n}, got {}x{}", q.nrows(), q.ncols())));
        }
        if r.shape() != (m, m) {
            return Err(Error::invalid(format!("R must be {m}x{m}, got {}x{}", r.nrows(), r.ncols())));
        }
        let all_finite = [&a, &c, &q, &r].iter().all(|mat| mat.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::invalid("system matrices must be finite"));
        }
        if !is_symmetric(&q) {
            return Err(Error::invalid("Q must be symmetric"));
        }
        if !is_symmetric(&r) {
            return Err(Error::invalid("R must be symmetric"));
        }
        if min_sym_eigenvalue(&q) < -PSD_TOL * scale(&q) {
            return Err(Error::invalid("Q must be positive semidefinite"));
        }
        if min_sym_eigenvalue(&r) <= 0.0 {
            return Err(Error::invalid("R must be positive definite"));
        }

        let sys = Self { a, c, q, r };
        if !sys.is_observable() {
            log::warn!("(A, C) is not observable; steady-state results may not apply");
        }
        if !sys.is_controllable() {
            log::warn!("(A, sqrt(Q)) is not controllable; steady-state results may not apply");
        }
        Ok(sys)
    }

    /// Single-state, single-output plant.
    pub fn scalar(a: f64, c: f64, q: f64, r: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, c),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Rank test on `[Cᵀ, (CA)ᵀ, …]ᵀ`.
    pub fn is_observable(&self) -> bool {
        let n = self.state_dim();
        let m = self.c.nrows();
        let mut obs = DMatrix::zeros(n * m, n);
        let mut block = self.c.clone();
        for k in 0..n {
            obs.view_mut((k * m, 0), (m, n)).copy_from(&block);
            block = &block * &self.a;
        }
        numerical_rank(&obs) == n
    }

    /// Rank test on `[B, AB, …]` with `B = √Q`.
    pub fn is_controllable(&self) -> bool {
        let n = self.state_dim();
        let b = sqrt_psd(&self.q);
        let mut ctrb = DMatrix::zeros(n, n * n);
        let mut block = b;
        for k in 0..n {
            ctrb.view_mut((0, k * n), (n, n)).copy_from(&block);
            block = &self.a * &block;
        }
        numerical_rank(&ctrb) == n
    }

    fn check_square(&self, x: &DMatrix<f64>) -> Result<()> {
        let n = self.state_dim();
        if x.shape() != (n, n) {
            return Err(Error::invalid(format!(
                "covariance must be {n}x{n}, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn h_unchecked(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&self.a * x * self.a.transpose() + &self.q)
    }

    fn gtilde_unchecked(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let xct = x * self.c.transpose();
        let s = &self.c * &xct + &self.r;
        // R ≻ 0 keeps S positive definite.
        let s_inv = s
            .cholesky()
            .map(|ch| ch.inverse())
            .expect("C X Cᵀ + R is positive definite");
        symmetrize(x - &xct * s_inv * xct.transpose())
    }
}

/// Steady-state local error covariance together with `ρ(A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateCov {
    pub pbar: DMatrix<f64>,
    pub spectral_radius_a: f64,
    pub iterations: usize,
}

/// `c_s(τ) = tr(h^τ(P̄))` for `τ = 0..=τ_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldingCostTable {
    costs: Vec<f64>,
    spectral_radius: f64,
}

impl HoldingCostTable {
    /// Builds a table from raw costs. Entries must be finite, nonnegative
    /// and nondecreasing.
    pub fn from_costs(costs: Vec<f64>, spectral_radius: f64) -> Result<Self> {
        if costs.len() < 2 {
            return Err(Error::invalid("cost table needs at least tau = 0 and tau = 1"));
        }
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::invalid("holding costs must be finite and nonnegative"));
        }
        if let Some(tau) = costs.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!("holding costs decrease between tau = {tau} and {}", tau + 1)));
        }
        if !(spectral_radius.is_finite() && spectral_radius >= 0.0) {
            return Err(Error::invalid("spectral radius must be finite and nonnegative"));
        }
        Ok(Self { costs, spectral_radius })
    }

    pub fn tau_max(&self) -> usize {
        self.costs.len() - 1
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    /// Cost at `τ`, saturating at `τ_max`.
    pub fn cost(&self, tau: usize) -> f64 {
        self.costs[tau.min(self.tau_max())]
    }

    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }

    pub fn max_cost(&self) -> f64 {
        self.costs[self.tau_max()]
    }
}

/// `h(X) = A X Aᵀ + Q`, symmetrized.
pub fn riccati_h(sys: &LtiSystem, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sys.check_square(x)?;
    if !is_symmetric(x) {
        return Err(Error::invalid("X must be symmetric"));
    }
    Ok(sys.h_unchecked(x))
}

/// Measurement update `g̃(X) = X − X Cᵀ (C X Cᵀ + R)⁻¹ C X`, symmetrized.
pub fn riccati_gtilde(sys: &LtiSystem, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sys.check_square(x)?;
    if !is_symmetric(x) {
        return Err(Error::invalid("X must be symmetric"));
    }
    if min_sym_eigenvalue(x) < -PSD_TOL * scale(x) {
        return Err(Error::invalid("X must be positive semidefinite"));
    }
    Ok(sys.gtilde_unchecked(x))
}

/// Iterates `X ← g̃(h(X))` from `X = 0` until successive iterates differ by
/// less than `tol` in max-abs norm.
pub fn steady_state_covariance(sys: &LtiSystem, tol: f64, max_iter: usize) -> Result<SteadyStateCov> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::invalid("tol must be positive and max_iter at least 1"));
    }
    let n = sys.state_dim();
    let mut x = DMatrix::zeros(n, n);
    let mut residual = f64::INFINITY;
    for k in 1..=max_iter {
        let next = sys.gtilde_unchecked(&sys.h_unchecked(&x));
        residual = (&next - &x).amax();
        x = next;
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            return Ok(SteadyStateCov {
                pbar: x,
                spectral_radius_a: sys.spectral_radius(),
                iterations: k,
            });
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: max_iter,
        residual,
        history: Vec::new(),
    })
}

/// `c_s(τ) = tr(h^τ(P̄))` by repeated application of `h`.
pub fn holding_cost_table(sys: &LtiSystem, pbar: &DMatrix<f64>, tau_max: usize) -> Result<HoldingCostTable> {
    if tau_max < 1 {
        return Err(Error::invalid("tau_max must be at least 1"));
    }
    sys.check_square(pbar)?;
    let mut costs = Vec::with_capacity(tau_max + 1);
    let mut x = symmetrize(pbar.clone());
    for tau in 0..=tau_max {
        if tau > 0 {
            x = sys.h_unchecked(&x);
        }
        let tr = x.trace();
        if !tr.is_finite() {
            return Err(Error::Overflow { tau });
        }
        costs.push(tr);
    }
    Ok(HoldingCostTable {
        costs,
        spectral_radius: sys.spectral_radius(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assumption2Report {
    pub lambda_min: f64,
    pub spectral_radius: f64,
    /// `1 − 1/ρ(A)²`.
    pub bound: f64,
    pub holds: bool,
}

/// Minimum success probability against `1 − 1/ρ(A)²`; always holds when
/// `ρ(A) ≤ 1`.
pub fn check_assumption2(sys: &LtiSystem, channel: &ChannelModel) -> Assumption2Report {
    success_bound_from_parts(sys.spectral_radius(), channel.lambda_min())
}

pub(crate) fn success_bound_from_parts(spectral_radius: f64, lambda_min: f64) -> Assumption2Report {
    let bound = if spectral_radius == 0.0 {
        f64::NEG_INFINITY
    } else {
        1.0 - 1.0 / (spectral_radius * spectral_radius)
    };
    Assumption2Report {
        lambda_min,
        spectral_radius,
        bound,
        // With ρ(A) ≤ 1 the bound is ≤ 0, so any probability qualifies.
        holds: spectral_radius <= 1.0 || lambda_min > bound,
    }
}

pub(crate) fn symmetrize(x: DMatrix<f64>) -> DMatrix<f64> {
    (&x + x.transpose()) * 0.5
}

fn scale(x: &DMatrix<f64>) -> f64 {
    x.amax().max(1.0)
}

fn is_symmetric(x: &DMatrix<f64>) -> bool {
    x.is_square() && (x - x.transpose()).amax() <= 1e-12 * scale(x)
}

pub(crate) fn min_sym_eigenvalue(x: &DMatrix<f64>) -> f64 {
    symmetrize(x.clone())
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn sqrt_psd(x: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(x.clone()).symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let norm = m.norm();
    if norm == 0.0 {
        return 0;
    }
    m.rank(RANK_TOL * norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn reference_system() -> LtiSystem {
        LtiSystem::scalar(0.85, 1.0, 0.3, 0.3).unwrap()
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    // Positive root of 0.7225 P² + 0.38325 P − 0.09 = 0.
    fn reference_pbar_root() -> f64 {
        let (a, b, c) = (0.7225_f64, 0.38325_f64, -0.09_f64);
        (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
    }

    #[test]
    fn h_examples() {
        let sys = reference_system();
        assert_abs_diff_eq!(riccati_h(&sys, &scalar(0.0)).unwrap()[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(riccati_h(&sys, &scalar(1.0)).unwrap()[0], 1.0225, epsilon = 1e-15);

        let ident = LtiSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(riccati_h(&ident, &x).unwrap(), x);
    }

    #[test]
    fn gtilde_examples() {
        let sys = reference_system();
        assert_eq!(riccati_gtilde(&sys, &scalar(0.0)).unwrap()[0], 0.0);
        assert_abs_diff_eq!(riccati_gtilde(&sys, &scalar(0.3)).unwrap()[0], 0.15, epsilon = 1e-15);
        // 0.42735·0.3 / 0.72735
        assert_abs_diff_eq!(
            riccati_gtilde(&sys, &scalar(0.42735)).unwrap()[0],
            0.42735 * 0.3 / 0.72735,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(riccati_gtilde(&sys, &scalar(0.42735)).unwrap()[0], 0.17627, epsilon = 1e-5);
    }

    #[test]
    fn riccati_dimension_and_psd_errors() {
        let sys = reference_system();
        assert!(matches!(riccati_h(&sys, &DMatrix::zeros(2, 2)), Err(Error::InvalidArgument(_))));
        assert!(matches!(riccati_gtilde(&sys, &scalar(-1.0)), Err(Error::InvalidArgument(_))));
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let sys2 = LtiSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!(riccati_h(&sys2, &skew).is_err());
    }

    #[test]
    fn rejects_bad_noise_covariances() {
        assert!(LtiSystem::scalar(0.5, 1.0, -0.1, 1.0).is_err());
        assert!(LtiSystem::scalar(0.5, 1.0, 0.1, 0.0).is_err());
        assert!(LtiSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1)
        )
        .is_err());
    }

    #[test]
    fn structural_rank_tests() {
        let sys = reference_system();
        assert!(sys.is_observable());
        assert!(sys.is_controllable());
        // Second state invisible and noise-free.
        let hidden = LtiSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        assert!(!hidden.is_observable());
        assert!(!hidden.is_controllable());
    }

    #[test]
    fn steady_state_scalar_cases() {
        let ss = steady_state_covariance(&reference_system(), 1e-12, DEFAULT_MAX_ITER).unwrap();
        assert_abs_diff_eq!(ss.pbar[0], reference_pbar_root(), epsilon = 1e-11);
        assert_abs_diff_eq!(ss.spectral_radius_a, 0.85, epsilon = 1e-15);

        let dead = LtiSystem::scalar(0.0, 1.0, 0.3, 0.3).unwrap();
        let ss = steady_state_covariance(&dead, 1e-12, 100).unwrap();
        assert_abs_diff_eq!(ss.pbar[0], 0.15, epsilon = 1e-15);

        let quiet = LtiSystem::scalar(0.7, 1.0, 0.0, 0.3).unwrap();
        let ss = steady_state_covariance(&quiet, 1e-12, 100).unwrap();
        assert_eq!(ss.pbar[0], 0.0);
    }

    #[test]
    fn steady_state_reports_non_convergence() {
        let err = steady_state_covariance(&reference_system(), 1e-12, 2).unwrap_err();
        match err {
            Error::ConvergenceFailure { iterations, residual, .. } => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn holding_costs_reference_system() {
        let sys = reference_system();
        let ss = steady_state_covariance(&sys, 1e-12, DEFAULT_MAX_ITER).unwrap();
        let table = holding_cost_table(&sys, &ss.pbar, 60).unwrap();
        let root = reference_pbar_root();
        assert_abs_diff_eq!(table.cost(0), root, epsilon = 1e-11);
        assert_abs_diff_eq!(table.cost(1), 0.7225 * root + 0.3, epsilon = 1e-11);
        assert_abs_diff_eq!(table.cost(1), 0.4273471, epsilon = 1e-5);
        assert!(table.costs().windows(2).all(|w| w[0] <= w[1]));
        // Scalar limit Q / (1 − A²).
        assert!((table.max_cost() - 0.3 / (1.0 - 0.7225)).abs() < 1e-3 * 1.0811);
        assert_eq!(table.cost(1000), table.max_cost());
    }

    #[test]
    fn holding_costs_errors() {
        let sys = reference_system();
        assert!(holding_cost_table(&sys, &scalar(0.1), 0).is_err());
        let wild = LtiSystem::scalar(1e200, 1.0, 1.0, 1.0).unwrap();
        match holding_cost_table(&wild, &scalar(1.0), 10) {
            // A² already overflows on the first step.
            Err(Error::Overflow { tau }) => assert_eq!(tau, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn success_bound_arithmetic() {
        let r = success_bound_from_parts(0.85, 0.2);
        assert!(r.holds);
        assert_abs_diff_eq!(r.bound, 1.0 - 1.0 / 0.7225, epsilon = 1e-15);
        assert_abs_diff_eq!(r.bound, -0.384, epsilon = 1e-3);

        let r = success_bound_from_parts(1.2, 0.2);
        assert!(!r.holds);
        assert_abs_diff_eq!(r.bound, 0.3056, epsilon = 1e-4);

        assert!(success_bound_from_parts(1.0, 0.0).holds);
        assert!(!success_bound_from_parts(1.01, 0.0).holds);
        assert!(success_bound_from_parts(0.99, 0.0).holds);
        assert!(success_bound_from_parts(0.0, 0.0).holds);
    }
}
