//! Stochastic order checkers on finite, ordered supports.
//!
//! First-order stochastic dominance (FSD), the monotone likelihood ratio
//! (MLR) order, total positivity of order two (TP2) and submodularity. Each
//! check returns a [`Verdict`] whose violation carries the lexicographically
//! smallest offending indices.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Tolerance for tail sums, cross-differences and minors.
pub const ORDER_TOL: f64 = 1e-12;
/// Tolerance for submodularity cross-differences.
pub const SUBMODULAR_TOL: f64 = 1e-9;

const SUM_TOL: f64 = 1e-12;

/// Outcome of an order check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Verdict<W> {
    Holds,
    Violated(W),
}

impl<W> Verdict<W> {
    pub fn holds(&self) -> bool {
        matches!(self, Verdict::Holds)
    }

    pub fn witness(&self) -> Option<&W> {
        match self {
            Verdict::Holds => None,
            Verdict::Violated(w) => Some(w),
        }
    }

    pub fn map<U>(self, f: impl FnOnce(W) -> U) -> Verdict<U> {
        match self {
            Verdict::Holds => Verdict::Holds,
            Verdict::Violated(w) => Verdict::Violated(f(w)),
        }
    }
}

/// Probability mass function over `0..len`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteDist {
    pmf: Vec<f64>,
}

impl FiniteDist {
    pub fn new(pmf: Vec<f64>) -> Result<Self> {
        if pmf.is_empty() {
            return Err(Error::invalid("distribution needs a non-empty support"));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("probabilities must be finite and nonnegative"));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { pmf })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::invalid("weights must have a positive finite total"));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn point_mass(len: usize, at: usize) -> Result<Self> {
        if at >= len {
            return Err(Error::invalid(format!("point mass index {at} outside support of size {len}")));
        }
        let mut pmf = vec![0.0; len];
        pmf[at] = 1.0;
        Ok(Self { pmf })
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("distribution needs a non-empty support"));
        }
        Ok(Self { pmf: vec![1.0 / len as f64; len] })
    }

    pub fn len(&self) -> usize {
        self.pmf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmf.is_empty()
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn prob(&self, x: usize) -> f64 {
        self.pmf[x]
    }

    pub fn expectation(&self, v: impl Fn(usize) -> f64) -> f64 {
        self.pmf.iter().enumerate().map(|(x, p)| p * v(x)).sum()
    }

    /// Upper tail `Σ_{x ≥ from} p(x)`.
    pub fn upper_tail(&self, from: usize) -> f64 {
        self.pmf[from.min(self.pmf.len())..].iter().sum()
    }
}

/// Nonnegative kernel `K(y | x)`, rows indexed by input, columns by output.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
    row_stochastic: bool,
}

impl KernelMatrix {
    /// Nonnegative function of two ordered variables.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::invalid("kernel must be non-empty"));
        }
        if entries.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("kernel entries must be finite and nonnegative"));
        }
        Ok(Self {
            entries,
            row_stochastic: false,
        })
    }

    /// Kernel whose rows are probability distributions.
    pub fn stochastic(entries: DMatrix<f64>) -> Result<Self> {
        let mut k = Self::new(entries)?;
        for (x, row) in k.entries.row_iter().enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > SUM_TOL {
                return Err(Error::invalid(format!("row {x} sums to {total}, not 1")));
            }
        }
        k.row_stochastic = true;
        Ok(k)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_matrix(rows)?)
    }

    pub fn stochastic_from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::stochastic(rows_to_matrix(rows)?)
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::stochastic(DMatrix::identity(n, n))
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn is_row_stochastic(&self) -> bool {
        self.row_stochastic
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.entries[(x, y)]
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Output distribution `q(y) = Σ_x K(y|x) p(x)`.
    pub fn push_forward(&self, p: &FiniteDist) -> Result<FiniteDist> {
        if !self.row_stochastic {
            return Err(Error::invalid("push-forward requires a row-stochastic kernel"));
        }
        if p.len() != self.nrows() {
            return Err(Error::invalid(format!(
                "distribution has {} states, kernel expects {}",
                p.len(),
                self.nrows()
            )));
        }
        let q: Vec<f64> = (0..self.ncols())
            .map(|y| (0..self.nrows()).map(|x| self.entries[(x, y)] * p.prob(x)).sum())
            .collect();
        FiniteDist::from_weights(&q)
    }

    /// Kernel product `(K1 K2)(z|x) = Σ_y K1(y|x) K2(z|y)`.
    pub fn compose(&self, other: &KernelMatrix) -> Result<KernelMatrix> {
        if self.ncols() != other.nrows() {
            return Err(Error::invalid("inner dimensions of composed kernels differ"));
        }
        let product = &self.entries * &other.entries;
        if self.row_stochastic && other.row_stochastic {
            Ok(KernelMatrix {
                entries: product,
                row_stochastic: true,
            })
        } else {
            KernelMatrix::new(product)
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::invalid("kernel rows must have equal length"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FsdWitness {
    /// Tail start `x̲` where `p1`'s upper tail exceeds `p2`'s.
    pub threshold: usize,
    pub tail_p1: f64,
    pub tail_p2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MlrWitness {
    pub x1: usize,
    pub x2: usize,
    pub cross_difference: f64,
}

/// Negative 2×2 minor at rows `x1 < x2` and columns `y1 < y2`:
/// `K(x1,y1)K(x2,y2) − K(x1,y2)K(x2,y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tp2Witness {
    pub lower: (usize, usize),
    pub upper: (usize, usize),
    pub minor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubmodularWitness {
    pub x1: usize,
    pub x2: usize,
    pub a1: usize,
    pub a2: usize,
    /// `Q(x2,a2) − Q(x2,a1)`.
    pub upper_gain: f64,
    /// `Q(x1,a2) − Q(x1,a1)`.
    pub lower_gain: f64,
}

fn same_support(p1: &FiniteDist, p2: &FiniteDist) -> Result<()> {
    if p1.len() != p2.len() {
        return Err(Error::invalid(format!(
            "support sizes differ: {} vs {}",
            p1.len(),
            p2.len()
        )));
    }
    Ok(())
}

/// `p1 ≤s p2`: every upper tail of `p1` is at most that of `p2`.
pub fn fsd_dominates(p1: &FiniteDist, p2: &FiniteDist) -> Result<Verdict<FsdWitness>> {
    same_support(p1, p2)?;
    let (mut t1, mut t2) = (0.0, 0.0);
    let mut worst = None;
    // Accumulate tails from the top; keep the smallest violating threshold.
    for x in (0..p1.len()).rev() {
        t1 += p1.prob(x);
        t2 += p2.prob(x);
        if t1 > t2 + ORDER_TOL {
            worst = Some(FsdWitness {
                threshold: x,
                tail_p1: t1,
                tail_p2: t2,
            });
        }
    }
    Ok(worst.map_or(Verdict::Holds, Verdict::Violated))
}

/// `p1 ≤r p2`: `p1(x1)p2(x2) − p1(x2)p2(x1) ≥ 0` for all `x1 < x2`.
pub fn mlr_dominates(p1: &FiniteDist, p2: &FiniteDist) -> Result<Verdict<MlrWitness>> {
    same_support(p1, p2)?;
    let n = p1.len();
    for x1 in 0..n {
        for x2 in x1 + 1..n {
            let d = p1.prob(x1) * p2.prob(x2) - p1.prob(x2) * p2.prob(x1);
            if d < -ORDER_TOL {
                return Ok(Verdict::Violated(MlrWitness {
                    x1,
                    x2,
                    cross_difference: d,
                }));
            }
        }
    }
    Ok(Verdict::Holds)
}

/// All 2×2 minors over ordered row and column pairs are nonnegative.
pub fn is_tp2(k: &KernelMatrix) -> Verdict<Tp2Witness> {
    first_negative_minor(k).map_or(Verdict::Holds, Verdict::Violated)
}

fn minor(k: &KernelMatrix, x1: usize, x2: usize, y1: usize, y2: usize) -> f64 {
    k.get(x1, y1) * k.get(x2, y2) - k.get(x1, y2) * k.get(x2, y1)
}

fn first_negative_minor(k: &KernelMatrix) -> Option<Tp2Witness> {
    let (nr, nc) = (k.nrows(), k.ncols());
    for x1 in 0..nr {
        for y1 in 0..nc {
            for x2 in x1 + 1..nr {
                for y2 in y1 + 1..nc {
                    let m = minor(k, x1, x2, y1, y2);
                    if m < -ORDER_TOL {
                        return Some(Tp2Witness {
                            lower: (x1, y1),
                            upper: (x2, y2),
                            minor: m,
                        });
                    }
                }
            }
        }
    }
    None
}

/// The most negative (or, if all are nonnegative, the smallest) 2×2 minor.
/// `None` when the kernel has fewer than two rows or columns.
pub fn smallest_minor(k: &KernelMatrix) -> Option<Tp2Witness> {
    let (nr, nc) = (k.nrows(), k.ncols());
    let mut best: Option<Tp2Witness> = None;
    for x1 in 0..nr {
        for x2 in x1 + 1..nr {
            for y1 in 0..nc {
                for y2 in y1 + 1..nc {
                    let m = minor(k, x1, x2, y1, y2);
                    if best.is_none_or(|b| m < b.minor) {
                        best = Some(Tp2Witness {
                            lower: (x1, y1),
                            upper: (x2, y2),
                            minor: m,
                        });
                    }
                }
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MlrPreservation {
    pub preserved: bool,
    /// Index of the first trial whose outputs broke the MLR order.
    pub first_violation: Option<usize>,
    pub trials: usize,
}

/// Randomized check that `K` maps MLR-ordered inputs to MLR-ordered outputs.
///
/// Each trial draws `p1 ≤r p2` by tilting a random base distribution with a
/// nondecreasing likelihood ratio. Every other trial concentrates the base on
/// two states so that single negative minors are exposed.
pub fn kernel_preserves_mlr(k: &KernelMatrix, trials: usize, seed: u64) -> Result<MlrPreservation> {
    if !k.is_row_stochastic() {
        return Err(Error::invalid("MLR preservation needs a row-stochastic kernel"));
    }
    let n = k.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let (p1, p2) = random_mlr_pair(n, trial % 2 == 1, &mut rng)?;
        debug_assert!(mlr_dominates(&p1, &p2)?.holds());
        let q1 = k.push_forward(&p1)?;
        let q2 = k.push_forward(&p2)?;
        if !mlr_dominates(&q1, &q2)?.holds() {
            return Ok(MlrPreservation {
                preserved: false,
                first_violation: Some(trial),
                trials,
            });
        }
    }
    Ok(MlrPreservation {
        preserved: true,
        first_violation: None,
        trials,
    })
}

fn random_mlr_pair(n: usize, concentrated: bool, rng: &mut impl Rng) -> Result<(FiniteDist, FiniteDist)> {
    if n == 1 {
        let p = FiniteDist::point_mass(1, 0)?;
        return Ok((p.clone(), p));
    }
    let mut base: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let mut ratio = vec![1.0; n];
    if concentrated {
        let x1 = rng.random_range(0..n - 1);
        let x2 = rng.random_range(x1 + 1..n);
        let noise = 10f64.powf(-rng.random_range(3.0..9.0));
        base.iter_mut().for_each(|b| *b *= noise);
        base[x1] = 1.0;
        base[x2] = 1.0;
        let tilt = rng.random_range(5.0..30.0_f64).exp();
        for r in ratio.iter_mut().skip(x2) {
            *r = tilt;
        }
    } else {
        let mut acc = 0.0;
        for r in ratio.iter_mut() {
            acc += rng.random::<f64>() * 3.0;
            *r = acc.exp();
        }
    }
    let tilted: Vec<f64> = base.iter().zip(&ratio).map(|(b, r)| b * r).collect();
    Ok((FiniteDist::from_weights(&base)?, FiniteDist::from_weights(&tilted)?))
}

/// Posterior `p⁺(x|y) ∝ K(y|x) p(x)`.
pub fn bayes_posterior(prior: &FiniteDist, k: &KernelMatrix, y: usize) -> Result<FiniteDist> {
    if prior.len() != k.nrows() {
        return Err(Error::invalid("prior and kernel rows disagree in size"));
    }
    if y >= k.ncols() {
        return Err(Error::invalid(format!("observation {y} outside kernel columns")));
    }
    let joint: Vec<f64> = (0..prior.len()).map(|x| k.get(x, y) * prior.prob(x)).collect();
    let evidence: f64 = joint.iter().sum();
    if !(evidence > 0.0) {
        return Err(Error::ZeroLikelihood { tau: 0, y });
    }
    FiniteDist::new(joint.iter().map(|j| j / evidence).collect()).or_else(|_| FiniteDist::from_weights(&joint))
}

/// `Q(x2,a2) − Q(x2,a1) ≤ Q(x1,a2) − Q(x1,a1)` for all `x1 < x2`, `a1 < a2`.
/// Rows index the state, columns the action.
pub fn is_submodular(q: &DMatrix<f64>) -> Verdict<SubmodularWitness> {
    let (nx, na) = q.shape();
    for x1 in 0..nx {
        for x2 in x1 + 1..nx {
            for a1 in 0..na {
                for a2 in a1 + 1..na {
                    let upper_gain = q[(x2, a2)] - q[(x2, a1)];
                    let lower_gain = q[(x1, a2)] - q[(x1, a1)];
                    if upper_gain > lower_gain + SUBMODULAR_TOL {
                        return Verdict::Violated(SubmodularWitness {
                            x1,
                            x2,
                            a1,
                            a2,
                            upper_gain,
                            lower_gain,
                        });
                    }
                }
            }
        }
    }
    Verdict::Holds
}
