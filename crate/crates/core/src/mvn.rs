//! Multivariate normal probabilities over hyper-rectangles.
//!
//! The integrand is the Genz separation-of-variables transform with
//! Genz-Bretz variable reordering, evaluated on a randomly shifted
//! Richtmyer lattice with baker's (tent) periodization and antithetic
//! pairs. Independent shifts give an unbiased standard error; the lattice
//! size doubles until `3 * SE <= tol`.
//!
//! Infinite limits are carried as IEEE `f64::INFINITY` /
//! `f64::NEG_INFINITY`. Coordinates with both limits infinite are removed
//! before integration.

use libm::erfc;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

/// Default absolute tolerance.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Default number of random lattice shifts.
pub const DEFAULT_SHIFTS: usize = 12;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const PSD_REJECT: f64 = -1e-8;
const PSD_CLIP: f64 = 1e-12;

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal quantile.
#[inline]
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else if p > 0.5 {
        -norm_quantile(1.0 - p)
    } else {
        let x = -SQRT_2 * erfc_inv(2.0 * p);
        // One Newton step in the lower tail polishes erfc_inv.
        let d = norm_pdf(x);
        if d > 0.0 {
            x - (norm_cdf(x) - p) / d
        } else {
            x
        }
    }
}

#[inline]
fn norm_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
    }
}

/// Normal CDF at both ends of `[a, b]`, taken in the upper tail when
/// `a > 0` to avoid cancellation. Returns `(upper_tail, at_a, at_b)`.
#[inline]
fn interval_cdfs(a: f64, b: f64) -> (bool, f64, f64) {
    if a > 0.0 {
        (true, norm_cdf(-a), norm_cdf(-b))
    } else {
        (false, norm_cdf(a), norm_cdf(b))
    }
}

/// `Phi(b) - Phi(a)`.
#[inline]
fn interval_prob(a: f64, b: f64) -> f64 {
    let (upper, ca, cb) = interval_cdfs(a, b);
    if upper { ca - cb } else { cb - ca }.max(0.0)
}

/// Quantile without the polishing step; accurate to about 1e-12, which is
/// ample inside the integrand.
#[inline]
fn raw_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        -SQRT_2 * erfc_inv(2.0 * p)
    }
}

/// Point at fraction `w` of the normal mass between `a` and `b`, given the
/// output of [`interval_cdfs`].
#[inline]
fn interval_quantile_from(a: f64, b: f64, cdfs: (bool, f64, f64), w: f64) -> f64 {
    let (upper, ca, cb) = cdfs;
    let y = if upper { -raw_quantile(ca - w * (ca - cb)) } else { raw_quantile(ca + w * (cb - ca)) };
    // Rounding can push an extreme quantile to +-inf; keep it inside the interval.
    y.clamp(a.max(-40.0), b.min(40.0))
}

/// Probability `P(lower <= X <= upper)` for `X ~ N(mean, correlation)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RectangleProblem {
    mean: Vec<f64>,
    correlation: DMatrix<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl RectangleProblem {
    pub fn new(mean: Vec<f64>, correlation: DMatrix<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let k = mean.len();
        if correlation.shape() != (k, k) || lower.len() != k || upper.len() != k {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: mean {k}, correlation {:?}, lower {}, upper {}",
                correlation.shape(),
                lower.len(),
                upper.len()
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("mean must be finite".into()));
        }
        for i in 0..k {
            if lower[i].is_nan() || upper[i].is_nan() {
                return Err(Error::InvalidInput(format!("limit {i} is NaN")));
            }
            if lower[i] > upper[i] {
                return Err(Error::InvalidInput(format!(
                    "lower limit {} exceeds upper limit {} in coordinate {i}",
                    lower[i], upper[i]
                )));
            }
            if (correlation[(i, i)] - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("correlation diagonal entry {i} is {}", correlation[(i, i)])));
            }
        }
        Ok(Self { mean, correlation, lower, upper })
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn correlation(&self) -> &DMatrix<f64> {
        &self.correlation
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
}

/// Drop every coordinate whose limits are `(-inf, inf)`.
pub fn marginalize(problem: &RectangleProblem) -> RectangleProblem {
    let keep: Vec<usize> = (0..problem.dimension())
        .filter(|&i| !(problem.lower[i] == f64::NEG_INFINITY && problem.upper[i] == f64::INFINITY))
        .collect();
    RectangleProblem {
        mean: keep.iter().map(|&i| problem.mean[i]).collect(),
        correlation: DMatrix::from_fn(keep.len(), keep.len(), |a, b| problem.correlation[(keep[a], keep[b])]),
        lower: keep.iter().map(|&i| problem.lower[i]).collect(),
        upper: keep.iter().map(|&i| problem.upper[i]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationResult {
    pub value: f64,
    /// Three randomized-QMC standard errors.
    pub error_estimate: f64,
    /// Integrand evaluations used.
    pub evaluations: u64,
    /// The correlation matrix needed eigenvalue clipping.
    pub repaired: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvnOptions {
    pub tol: f64,
    pub shifts: usize,
    /// Lattice points per shift in the first round.
    pub initial_points: usize,
    pub max_evaluations: u64,
}

impl Default for MvnOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, shifts: DEFAULT_SHIFTS, initial_points: 256, max_evaluations: 50_000_000 }
    }
}

impl MvnOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

/// Integrate with default options at absolute tolerance `tol`.
pub fn mvn_rectangle(problem: &RectangleProblem, tol: f64, seed: u64) -> Result<IntegrationResult> {
    mvn_rectangle_with(problem, &MvnOptions::with_tol(tol), seed)
}

pub fn mvn_rectangle_with(problem: &RectangleProblem, opts: &MvnOptions, seed: u64) -> Result<IntegrationResult> {
    if !(opts.tol > 0.0) || opts.shifts < 2 {
        return Err(Error::InvalidInput(format!(
            "tolerance must be positive and shifts >= 2 (got {}, {})",
            opts.tol, opts.shifts
        )));
    }
    let reduced = marginalize(problem);
    let k = reduced.dimension();
    let exact = |value: f64, repaired| IntegrationResult { value, error_estimate: 0.0, evaluations: 0, repaired };
    if k == 0 {
        return Ok(exact(1.0, false));
    }
    let a: Vec<f64> = (0..k).map(|i| reduced.lower[i] - reduced.mean[i]).collect();
    let b: Vec<f64> = (0..k).map(|i| reduced.upper[i] - reduced.mean[i]).collect();
    if (0..k).any(|i| a[i] == b[i]) {
        return Ok(exact(0.0, false));
    }
    let (corr, repaired) = repair_psd(&reduced.correlation)?;
    if k == 1 {
        return Ok(exact(interval_prob(a[0], b[0]), repaired));
    }
    let sov = Sov::new(&corr, a, b);
    if sov.prob_zero {
        return Ok(exact(0.0, repaired));
    }
    let mut res = sov.integrate(opts, seed);
    res.repaired = repaired;
    Ok(res)
}

/// Symmetrize, reject clearly indefinite matrices, and clip tiny eigenvalues.
fn repair_psd(c: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let sym = (c + c.transpose()) * 0.5;
    if sym.clone().cholesky().is_some() {
        let eig = sym.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        if min >= PSD_CLIP {
            return Ok((sym, false));
        }
    }
    let eig = sym.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < PSD_REJECT {
        return Err(Error::NotPositiveSemiDefinite { min_eigenvalue: min });
    }
    let clipped = eig.eigenvalues.map(|v| v.max(PSD_CLIP));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let scale: Vec<f64> = (0..rebuilt.nrows()).map(|i| rebuilt[(i, i)].sqrt()).collect();
    let k = rebuilt.nrows();
    let out = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rebuilt[(i, j)] / (scale[i] * scale[j]) });
    Ok((out, true))
}

/// Reordered Cholesky factor and limits for the separation-of-variables integrand.
struct Sov {
    k: usize,
    chol: DMatrix<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    prob_zero: bool,
}

impl Sov {
    fn new(corr: &DMatrix<f64>, mut a: Vec<f64>, mut b: Vec<f64>) -> Self {
        let k = a.len();
        let mut c = corr.clone();
        let mut l = DMatrix::<f64>::zeros(k, k);
        let mut y = vec![0.0; k];
        let mut prob_zero = false;
        for i in 0..k {
            // Pick the remaining variable with the smallest conditional probability.
            let mut best = i;
            let mut best_prob = f64::INFINITY;
            for j in i..k {
                let s: f64 = (0..i).map(|m| l[(j, m)] * y[m]).sum();
                let var = c[(j, j)] - (0..i).map(|m| l[(j, m)].powi(2)).sum::<f64>();
                let den = var.max(1e-300).sqrt();
                let p = interval_prob((a[j] - s) / den, (b[j] - s) / den);
                if p < best_prob {
                    best_prob = p;
                    best = j;
                }
            }
            if best != i {
                c.swap_rows(i, best);
                c.swap_columns(i, best);
                l.swap_rows(i, best);
                a.swap(i, best);
                b.swap(i, best);
            }
            let var = c[(i, i)] - (0..i).map(|m| l[(i, m)].powi(2)).sum::<f64>();
            let lii = var.max(0.0).sqrt();
            l[(i, i)] = lii;
            if lii > 1e-10 {
                for j in i + 1..k {
                    let s: f64 = (0..i).map(|m| l[(j, m)] * l[(i, m)]).sum();
                    l[(j, i)] = (c[(j, i)] - s) / lii;
                }
            }
            let s: f64 = (0..i).map(|m| l[(i, m)] * y[m]).sum();
            if lii > 1e-10 {
                let (lo, hi) = ((a[i] - s) / lii, (b[i] - s) / lii);
                let p = interval_prob(lo, hi);
                y[i] = if p > 1e-300 {
                    (norm_pdf(lo) - norm_pdf(hi)) / p
                } else if lo.is_finite() {
                    lo
                } else {
                    hi
                };
            } else {
                y[i] = 0.0;
            }
            if best_prob <= 0.0 {
                prob_zero = true;
            }
        }
        Self { k, chol: l, a, b, prob_zero }
    }

    /// Integrand at a point of `[0, 1)^(k-1)`.
    fn eval(&self, w: &[f64], y: &mut [f64]) -> f64 {
        let mut value = 1.0;
        for i in 0..self.k {
            let row = self.chol.row(i);
            let s: f64 = (0..i).map(|m| row[m] * y[m]).sum();
            let lii = row[i];
            let (lo, hi) = if lii > 1e-10 {
                ((self.a[i] - s) / lii, (self.b[i] - s) / lii)
            } else {
                // Degenerate direction: an indicator on the conditional value.
                let inside = self.a[i] <= s && s <= self.b[i];
                if !inside {
                    return 0.0;
                }
                y[i] = 0.0;
                continue;
            };
            let cdfs = interval_cdfs(lo, hi);
            let (upper, ca, cb) = cdfs;
            value *= if upper { ca - cb } else { cb - ca }.max(0.0);
            if value == 0.0 {
                return 0.0;
            }
            if i + 1 < self.k {
                y[i] = interval_quantile_from(lo, hi, cdfs, w[i]);
            }
        }
        value
    }

    fn integrate(&self, opts: &MvnOptions, seed: u64) -> IntegrationResult {
        let dim = self.k - 1;
        let gen = richtmyer_vector(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![0.0; dim];
        let mut y = vec![0.0; self.k];

        let mut points = opts.initial_points.max(16);
        let mut evaluations: u64 = 0;
        // Inverse-variance pooling across rounds.
        let (mut pooled, mut pooled_var) = (0.0, f64::INFINITY);
        loop {
            let mut means = Vec::with_capacity(opts.shifts);
            for _ in 0..opts.shifts {
                let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
                let mut sum = 0.0;
                for j in 1..=points {
                    let jf = j as f64;
                    for d in 0..dim {
                        let x = (jf * gen[d] + shift[d]).fract();
                        w[d] = (2.0 * x - 1.0).abs();
                    }
                    let f1 = self.eval(&w, &mut y);
                    for v in w.iter_mut() {
                        *v = 1.0 - *v;
                    }
                    let f2 = self.eval(&w, &mut y);
                    sum += 0.5 * (f1 + f2);
                }
                means.push(sum / points as f64);
            }
            evaluations += (2 * points * opts.shifts) as u64;
            let m = opts.shifts as f64;
            let mean = means.iter().sum::<f64>() / m;
            let var = means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m * (m - 1.0));
            if pooled_var.is_infinite() {
                pooled = mean;
                pooled_var = var;
            } else if var + pooled_var > 0.0 {
                let wgt = pooled_var / (var + pooled_var);
                pooled += wgt * (mean - pooled);
                pooled_var *= 1.0 - wgt;
            } else {
                pooled = mean;
                pooled_var = 0.0;
            }
            let err = 3.0 * pooled_var.sqrt();
            let next = evaluations + (4 * points * opts.shifts) as u64;
            if err <= opts.tol || next > opts.max_evaluations {
                if err > opts.tol {
                    log::debug!("mvn: tolerance {} not reached, error {err:.3e}", opts.tol);
                }
                return IntegrationResult {
                    value: pooled.clamp(0.0, 1.0),
                    error_estimate: err,
                    evaluations,
                    repaired: false,
                };
            }
            points *= 2;
        }
    }
}

/// Fractional parts of square roots of the first `dim` primes.
fn richtmyer_vector(dim: usize) -> Vec<f64> {
    let mut primes = Vec::with_capacity(dim);
    let mut candidate = 2u64;
    while primes.len() < dim {
        if primes.iter().take_while(|&&p| p * p <= candidate).all(|&p| !candidate.is_multiple_of(p)) {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes.iter().map(|&p| (p as f64).sqrt().fract()).collect()
}
