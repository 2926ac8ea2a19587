//! Closed-form covariance algebra for the crossover linear mixed model.
//!
//! Fixed effects are always ordered `(mu0, pi_2..pi_D, tau_1..tau_{D-1})`,
//! giving `2D - 1` columns. Index helpers [`period_index`] and
//! [`treatment_index`] map effects onto that layout.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequences::{generate_sequence_set, SequenceFamily, SequenceSet};

/// Reciprocal condition number below which an information matrix is
/// treated as singular.
pub const SINGULARITY_RCOND: f64 = 1e-12;

/// Between-subject and within-subject variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    sigma_b_sq: f64,
    sigma_e_sq: f64,
}

impl VarianceComponents {
    pub fn new(sigma_b_sq: f64, sigma_e_sq: f64) -> Result<Self> {
        if !(sigma_b_sq > 0.0 && sigma_b_sq.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma_b^2 must be positive and finite, got {sigma_b_sq}")));
        }
        if !(sigma_e_sq > 0.0 && sigma_e_sq.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma_e^2 must be positive and finite, got {sigma_e_sq}")));
        }
        Ok(Self { sigma_b_sq, sigma_e_sq })
    }

    pub fn sigma_b_sq(&self) -> f64 {
        self.sigma_b_sq
    }

    pub fn sigma_e_sq(&self) -> f64 {
        self.sigma_e_sq
    }
}

/// Column of `pi_j` (`j` in `2..=d`).
pub fn period_index(j: usize) -> usize {
    debug_assert!(j >= 2);
    j - 1
}

/// Column of `tau_t` (`t` in `1..d`) in a trial with `d` treatments.
pub fn treatment_index(t: usize, d: usize) -> usize {
    debug_assert!(t >= 1 && t < d);
    d - 1 + t
}

/// Compound-symmetric covariance of one patient's `r` responses.
pub fn sigma_r(r: usize, vc: &VarianceComponents) -> DMatrix<f64> {
    DMatrix::from_fn(r, r, |p, q| vc.sigma_b_sq + if p == q { vc.sigma_e_sq } else { 0.0 })
}

/// Closed-form inverse of [`sigma_r`].
pub fn sigma_r_inverse(r: usize, vc: &VarianceComponents) -> DMatrix<f64> {
    let (b, e) = (vc.sigma_b_sq, vc.sigma_e_sq);
    let big = e + r as f64 * b;
    let denom = e * big;
    DMatrix::from_fn(r, r, |p, q| (if p == q { big } else { 0.0 } - b) / denom)
}

/// Information contributed by one stage of `n` patients when `r` of the
/// `d` treatments remain: `sum_i (n/|S_r|) X_i^T Sigma_r^{-1} X_i`.
///
/// Built from the block closed form, which only depends on the set being
/// complete-block and period balanced.
pub fn stage_information(
    r: usize,
    d: usize,
    n: usize,
    vc: &VarianceComponents,
    seqs: &SequenceSet,
) -> Result<DMatrix<f64>> {
    if seqs.r() != r || r < 2 || r > d {
        return Err(Error::InvalidInput(format!("sequence set for r = {} does not match r = {r} (d = {d})", seqs.r())));
    }
    if !n.is_multiple_of(seqs.size()) {
        return Err(Error::Divisibility { n, r, size: seqs.size() });
    }
    let (b, e) = (vc.sigma_b_sq, vc.sigma_e_sq);
    let rf = r as f64;
    let denom = e * (e + rf * b);
    let a = rf * e / denom;
    let bb = e / denom;
    let c = |same: bool| ((if same { e + rf * b } else { 0.0 }) - b) / denom;
    let cross = e / (rf * denom);

    let p = 2 * d - 1;
    let mut m = DMatrix::zeros(p, p);
    m[(0, 0)] = a;
    // Active periods pi_2..pi_r and treatments tau_1..tau_{r-1}.
    let periods: Vec<usize> = (2..=r).map(period_index).collect();
    let treatments: Vec<usize> = (1..r).map(|t| treatment_index(t, d)).collect();
    for (&pi, &ti) in periods.iter().zip(&treatments) {
        m[(0, pi)] = bb;
        m[(pi, 0)] = bb;
        m[(0, ti)] = bb;
        m[(ti, 0)] = bb;
    }
    for (u, (&pu, &tu)) in periods.iter().zip(&treatments).enumerate() {
        for (v, (&pv, &tv)) in periods.iter().zip(&treatments).enumerate() {
            m[(pu, pv)] = c(u == v);
            m[(tu, tv)] = c(u == v);
            m[(pu, tv)] = cross;
            m[(tu, pv)] = cross;
        }
    }
    Ok(m * n as f64)
}

/// Number of completed stages `L_{lr}` with exactly `r` treatments remaining.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageAllocation {
    // counts[r - 1] = L_{lr}, r = 1..=D
    counts: Vec<usize>,
}

impl StageAllocation {
    /// `counts[r - 1]` is the number of stages run with `r` treatments.
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidInput("allocation needs D >= 2 entries".into()));
        }
        if counts[0] != 0 {
            return Err(Error::InvalidInput("no stage can run with only the control remaining".into()));
        }
        if counts.iter().sum::<usize>() == 0 {
            return Err(Error::InvalidInput("allocation has no completed stages".into()));
        }
        Ok(Self { counts })
    }

    /// Allocation for a stage history listing treatments remaining per stage.
    pub fn from_history(d: usize, remaining_per_stage: &[usize]) -> Result<Self> {
        if remaining_per_stage.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput("treatment counts cannot increase over stages".into()));
        }
        let mut counts = vec![0; d];
        for &r in remaining_per_stage {
            if r == 0 || r > d {
                return Err(Error::InvalidInput(format!("invalid treatment count {r}")));
            }
            counts[r - 1] += 1;
        }
        Self::new(counts)
    }

    /// All `l` stages run with every treatment present.
    pub fn no_drop(d: usize, l: usize) -> Self {
        let mut counts = vec![0; d];
        counts[d - 1] = l;
        Self { counts }
    }

    pub fn treatments(&self) -> usize {
        self.counts.len()
    }

    pub fn stages(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn count(&self, r: usize) -> usize {
        self.counts[r - 1]
    }
}

/// Covariance of the fixed-effect estimates after some stages.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffectsCovariance {
    pub matrix: DMatrix<f64>,
}

impl FixedEffectsCovariance {
    /// The `(D-1) x (D-1)` block for `tau_1..tau_{D-1}`.
    pub fn treatment_block(&self) -> DMatrix<f64> {
        let p = self.matrix.nrows();
        let d = p.div_ceil(2);
        self.matrix.view((d, d), (d - 1, d - 1)).into_owned()
    }
}

/// Invert a symmetric positive-definite matrix, reporting singularity by
/// reciprocal condition number.
pub fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let rcond = if max > 0.0 { min / max } else { 0.0 };
    if !(rcond >= SINGULARITY_RCOND) {
        return Err(Error::Singular { rcond });
    }
    let chol = m.clone().cholesky().ok_or(Error::Singular { rcond })?;
    Ok(chol.inverse())
}

/// Accumulated information `sum_r L_{lr} * stage_information(r)`.
pub fn accumulated_information(
    alloc: &StageAllocation,
    n: usize,
    vc: &VarianceComponents,
    family: SequenceFamily,
) -> Result<DMatrix<f64>> {
    let d = alloc.treatments();
    let mut info = DMatrix::zeros(2 * d - 1, 2 * d - 1);
    for r in 2..=d {
        let stages = alloc.count(r);
        if stages == 0 {
            continue;
        }
        let seqs = generate_sequence_set(r, family)?;
        info += stage_information(r, d, n, vc, &seqs)? * stages as f64;
    }
    Ok(info)
}

/// Covariance of the fixed-effect estimates for a given stage allocation.
pub fn fixed_effects_covariance(
    alloc: &StageAllocation,
    n: usize,
    vc: &VarianceComponents,
    family: SequenceFamily,
) -> Result<FixedEffectsCovariance> {
    let info = accumulated_information(alloc, n, vc, family)?;
    Ok(FixedEffectsCovariance { matrix: invert_spd(&info)? })
}

/// Closed form of the fixed-effects covariance when all `l` stages ran with
/// every treatment present: blocks `F`, `G`, `H`, scaled by `1/(l n)`.
pub fn no_drop_covariance(d: usize, l: usize, n: usize, vc: &VarianceComponents) -> DMatrix<f64> {
    let (b, e) = (vc.sigma_b_sq, vc.sigma_e_sq);
    let df = d as f64;
    let f = b + (2.0 * df - 1.0) / df * e;
    let p = 2 * d - 1;
    let block = |i: usize| -> usize {
        if i == 0 {
            0
        } else if i < d {
            1
        } else {
            2
        }
    };
    let scale = 1.0 / (l as f64 * n as f64);
    DMatrix::from_fn(p, p, |i, j| {
        let v = match (block(i), block(j)) {
            (0, 0) => f,
            (0, _) | (_, 0) => -e,
            (bi, bj) if bi == bj => e * if i == j { 2.0 } else { 1.0 },
            _ => 0.0,
        };
        v * scale
    })
}

/// Joint law of all `L(D-1)` standardized statistics under the canonical
/// structure. Statistic `(d, l)` (1-based) lives at index `(l-1)(D-1) + d-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    pub treatments: usize,
    pub stages: usize,
    /// Information level `I_dl` per statistic.
    pub information: Vec<f64>,
    /// Correlation matrix with unit diagonal.
    pub correlation: DMatrix<f64>,
}

impl JointDistribution {
    pub fn dimension(&self) -> usize {
        self.information.len()
    }

    pub fn index(&self, d: usize, l: usize) -> usize {
        (l - 1) * (self.treatments - 1) + (d - 1)
    }

    /// Mean vector `tau_d * sqrt(I_dl)` for true effects `tau`.
    pub fn mean(&self, tau: &[f64]) -> Vec<f64> {
        let k = self.treatments - 1;
        self.information.iter().enumerate().map(|(i, info)| tau[i % k] * info.sqrt()).collect()
    }

    /// Restriction to the statistics of one experimental treatment (an
    /// `L`-dimensional law identical to the two-treatment case).
    pub fn restrict_to_treatment(&self, d: usize) -> JointDistribution {
        let idx: Vec<usize> = (1..=self.stages).map(|l| self.index(d, l)).collect();
        JointDistribution {
            treatments: 2,
            stages: self.stages,
            information: idx.iter().map(|&i| self.information[i]).collect(),
            correlation: DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.correlation[(idx[a], idx[b])]),
        }
    }
}

/// Canonical joint distribution from the closed-form entries.
pub fn joint_distribution(d: usize, stages: usize, n: usize, sigma_e_sq: f64) -> JointDistribution {
    let k = d - 1;
    let dim = stages * k;
    let information = (0..dim).map(|i| ((i / k + 1) * n) as f64 / (2.0 * sigma_e_sq)).collect();
    let correlation = DMatrix::from_fn(dim, dim, |i, j| {
        let (l1, d1) = (i / k + 1, i % k);
        let (l2, d2) = (j / k + 1, j % k);
        let (a, b) = (l1.min(l2) as f64, l1.max(l2) as f64);
        0.5 * (a / b).sqrt() * if d1 == d2 { 2.0 } else { 1.0 }
    });
    JointDistribution { treatments: d, stages, information, correlation }
}

/// Canonical joint distribution assembled from fixed-effects covariances:
/// `cov(Z_a, Z_b) = diag(I_a^{1/2}) cov(tau_b, tau_b) diag(I_b^{1/2})`
/// for `a <= b`, with every stage run on all treatments.
pub fn joint_distribution_from_covariance(
    d: usize,
    stages: usize,
    n: usize,
    vc: &VarianceComponents,
    family: SequenceFamily,
) -> Result<JointDistribution> {
    let k = d - 1;
    let blocks = (1..=stages)
        .map(|l| fixed_effects_covariance(&StageAllocation::no_drop(d, l), n, vc, family).map(|c| c.treatment_block()))
        .collect::<Result<Vec<_>>>()?;
    let information: Vec<f64> = (0..stages * k).map(|i| 1.0 / blocks[i / k][(i % k, i % k)]).collect();
    let dim = stages * k;
    let correlation = DMatrix::from_fn(dim, dim, |i, j| {
        let (l1, d1) = (i / k, i % k);
        let (l2, d2) = (j / k, j % k);
        let later = l1.max(l2);
        information[i].sqrt() * blocks[later][(d1, d2)] * information[j].sqrt()
    });
    Ok(JointDistribution { treatments: d, stages, information, correlation })
}
