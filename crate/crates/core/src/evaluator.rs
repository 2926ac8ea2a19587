//! Stopping-path enumeration and operating characteristics.
//!
//! A stopping path `(omega, psi)` records, for every experimental
//! treatment, the analysis at which it left the trial and whether it left
//! for efficacy. Its probability is a rectangle probability of the
//! canonical joint distribution; coordinates after a treatment has left get
//! `(-inf, inf)` limits and are marginalized out, so one correlation matrix
//! serves every path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{joint_distribution, JointDistribution};
use crate::error::{Error, Result};
use crate::mvn::{mvn_rectangle_with, IntegrationResult, MvnOptions, RectangleProblem};
use crate::sequences::{lcm_group_size, SequenceFamily};

/// A complete group sequential crossover design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDesign {
    /// Number of treatments `D`, including the control.
    pub treatments: usize,
    /// Maximum number of stages `L`.
    pub stages: usize,
    /// Patients recruited per stage, `n`.
    pub group_size: usize,
    pub futility: Vec<f64>,
    pub efficacy: Vec<f64>,
    /// Within-subject variance.
    pub sigma_e_sq: f64,
    /// Between-subject variance; only needed to simulate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_b_sq: Option<f64>,
    pub family: SequenceFamily,
    /// Clinically relevant difference.
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Relative tolerance for the `f_L = e_L` closure.
const CLOSURE_TOL: f64 = 1e-9;

impl TrialDesign {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidInput(msg));
        if self.treatments < 2 {
            return invalid(format!("need at least 2 treatments, got {}", self.treatments));
        }
        if self.stages < 1 {
            return invalid("need at least one stage".into());
        }
        if self.group_size < 1 {
            return invalid("group size must be positive".into());
        }
        if self.futility.len() != self.stages || self.efficacy.len() != self.stages {
            return invalid(format!(
                "expected {} futility and efficacy boundaries, got {} and {}",
                self.stages,
                self.futility.len(),
                self.efficacy.len()
            ));
        }
        if self.futility.iter().chain(&self.efficacy).any(|v| v.is_nan()) {
            return invalid("boundaries must not be NaN".into());
        }
        for l in 0..self.stages - 1 {
            if self.futility[l] > self.efficacy[l] {
                return invalid(format!(
                    "futility boundary {} exceeds efficacy boundary {} at stage {}",
                    self.futility[l],
                    self.efficacy[l],
                    l + 1
                ));
            }
        }
        let (fl, el) = (self.futility[self.stages - 1], self.efficacy[self.stages - 1]);
        if (fl - el).abs() > CLOSURE_TOL * el.abs().max(1.0) {
            return invalid(format!("final boundaries must coincide, got f_L = {fl}, e_L = {el}"));
        }
        if !(self.sigma_e_sq > 0.0 && self.sigma_e_sq.is_finite()) {
            return invalid(format!("sigma_e^2 must be positive, got {}", self.sigma_e_sq));
        }
        if let Some(b) = self.sigma_b_sq {
            if !(b > 0.0 && b.is_finite()) {
                return invalid(format!("sigma_b^2 must be positive, got {b}"));
            }
        }
        // A single-stage design never changes sequence set, so only group
        // sequential designs are held to the divisibility rule.
        if self.stages > 1 {
            let lcm = lcm_group_size(self.treatments, self.family);
            if !self.group_size.is_multiple_of(lcm) {
                return invalid(format!("group size {} is not divisible by {lcm}", self.group_size));
            }
        }
        Ok(())
    }

    pub fn experimental(&self) -> usize {
        self.treatments - 1
    }

    pub fn max_n(&self) -> usize {
        self.group_size * self.stages
    }

    pub fn max_o(&self) -> usize {
        self.group_size * self.stages * self.treatments
    }

    pub fn joint(&self) -> JointDistribution {
        joint_distribution(self.treatments, self.stages, self.group_size, self.sigma_e_sq)
    }
}

/// Per-treatment exit stage (1-based) and exit reason.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StoppingPath {
    pub omega: Vec<usize>,
    /// `true` when the treatment left for efficacy (its null was rejected).
    pub psi: Vec<bool>,
}

impl StoppingPath {
    pub fn new(omega: Vec<usize>, psi: Vec<bool>) -> Self {
        assert_eq!(omega.len(), psi.len());
        Self { omega, psi }
    }

    /// Number of distinct paths `(2L)^(D-1)`.
    pub fn count(experimental: usize, stages: usize) -> usize {
        (2 * stages).pow(experimental as u32)
    }

    /// Path `index` in mixed radix `2L`, treatment 1 least significant.
    pub fn from_index(mut index: usize, experimental: usize, stages: usize) -> Self {
        let mut omega = Vec::with_capacity(experimental);
        let mut psi = Vec::with_capacity(experimental);
        for _ in 0..experimental {
            let code = index % (2 * stages);
            index /= 2 * stages;
            omega.push(code / 2 + 1);
            psi.push(code % 2 == 1);
        }
        Self { omega, psi }
    }

    pub fn index(&self, stages: usize) -> usize {
        self.omega.iter().zip(&self.psi).rev().fold(0, |acc, (&w, &p)| acc * 2 * stages + (w - 1) * 2 + usize::from(p))
    }

    pub fn rejects_any(&self) -> bool {
        self.psi.iter().any(|&p| p)
    }

    /// Patients recruited: `n * max_d omega_d`.
    pub fn sample_size(&self, n: usize) -> usize {
        n * self.omega.iter().copied().max().unwrap_or(0)
    }

    /// Observations made: at every stage run, one per remaining
    /// experimental treatment plus one for the control, per patient.
    pub fn observations(&self, n: usize) -> usize {
        let run = self.omega.iter().copied().max().unwrap_or(0);
        (1..=run).map(|l| n * (self.omega.iter().filter(|&&w| w >= l).count() + 1)).sum()
    }
}

/// Limits for the statistic of a treatment at stage `l`, given its exit
/// stage and reason.
pub fn stage_limits(l: usize, omega: usize, psi: bool, futility: &[f64], efficacy: &[f64]) -> (f64, f64) {
    use std::cmp::Ordering::*;
    match l.cmp(&omega) {
        Less => (futility[l - 1], efficacy[l - 1]),
        Equal if psi => (efficacy[l - 1], f64::INFINITY),
        Equal => (f64::NEG_INFINITY, futility[l - 1]),
        Greater => (f64::NEG_INFINITY, f64::INFINITY),
    }
}

/// Lower and upper limits of every statistic, stage-major.
pub fn path_bounds(path: &StoppingPath, design: &TrialDesign) -> (Vec<f64>, Vec<f64>) {
    let k = design.experimental();
    let dim = k * design.stages;
    let mut lower = vec![0.0; dim];
    let mut upper = vec![0.0; dim];
    for l in 1..=design.stages {
        for d in 0..k {
            let (lo, hi) = stage_limits(l, path.omega[d], path.psi[d], &design.futility, &design.efficacy);
            lower[(l - 1) * k + d] = lo;
            upper[(l - 1) * k + d] = hi;
        }
    }
    (lower, upper)
}

/// Operating characteristics of a design at one effect vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingCharacteristics {
    pub tau: Vec<f64>,
    /// Probability of rejecting at least one true null (`tau_d <= 0`).
    pub fwer_at: f64,
    pub reject_h01: f64,
    /// Probability of rejecting at least one null.
    pub power_any: f64,
    /// Per-treatment rejection probabilities.
    pub reject_each: Vec<f64>,
    pub expected_n: f64,
    pub expected_o: f64,
    pub max_n: usize,
    pub max_o: usize,
    /// Sum of the per-integral error estimates.
    pub integration_error: f64,
}

/// One row of a characteristics curve at `tau = (theta, ..., theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub theta: f64,
    pub reject_h01: f64,
    pub reject_any: f64,
    pub expected_n: f64,
    pub expected_o: f64,
}

/// `splitmix64` mixing of a base seed with a job index.
pub(crate) fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Evaluates path probabilities for one design.
#[derive(Debug, Clone)]
pub struct Evaluator {
    design: TrialDesign,
    joint: JointDistribution,
    opts: MvnOptions,
    seed: u64,
}

impl Evaluator {
    pub fn new(design: &TrialDesign, opts: MvnOptions, seed: u64) -> Result<Self> {
        design.validate()?;
        Ok(Self { design: design.clone(), joint: design.joint(), opts, seed })
    }

    pub fn design(&self) -> &TrialDesign {
        &self.design
    }

    pub fn joint(&self) -> &JointDistribution {
        &self.joint
    }

    fn check_tau(&self, tau: &[f64]) -> Result<()> {
        if tau.len() != self.design.experimental() {
            return Err(Error::InvalidInput(format!(
                "expected {} treatment effects, got {}",
                self.design.experimental(),
                tau.len()
            )));
        }
        if tau.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("treatment effects must be finite".into()));
        }
        Ok(())
    }

    pub fn path_problem(&self, path: &StoppingPath, tau: &[f64]) -> Result<RectangleProblem> {
        let (lower, upper) = path_bounds(path, &self.design);
        RectangleProblem::new(self.joint.mean(tau), self.joint.correlation.clone(), lower, upper)
    }

    pub fn path_probability(&self, path: &StoppingPath, tau: &[f64]) -> Result<IntegrationResult> {
        self.check_tau(tau)?;
        let problem = self.path_problem(path, tau)?;
        let index = path.index(self.design.stages) as u64;
        mvn_rectangle_with(&problem, &self.opts, mix_seed(self.seed, index))
    }

    /// Probabilities of every path, in path-index order.
    pub fn path_probabilities(&self, tau: &[f64]) -> Result<Vec<(StoppingPath, IntegrationResult)>> {
        self.check_tau(tau)?;
        let (k, stages) = (self.design.experimental(), self.design.stages);
        (0..StoppingPath::count(k, stages))
            .into_par_iter()
            .map(|i| {
                let path = StoppingPath::from_index(i, k, stages);
                let res = self.path_probability(&path, tau)?;
                Ok((path, res))
            })
            .collect()
    }

    /// Probability of rejecting at least one null hypothesis at `tau`; at
    /// `tau = 0` this is the maximal familywise error rate.
    ///
    /// Computed as one minus the probability of the `L^(D-1)` all-futility
    /// paths, which equals the sum over all paths with some `psi_d = 1`.
    pub fn familywise_error(&self, tau: &[f64]) -> Result<f64> {
        self.check_tau(tau)?;
        let (p, _) = no_rejection_probability(
            &self.joint,
            &self.joint.mean(tau),
            &self.design.futility,
            &self.design.efficacy,
            &self.opts,
            self.seed,
        )?;
        Ok((1.0 - p).clamp(0.0, 1.0))
    }

    /// Probability that `H_01` is rejected when `tau_1 = tau1`, from the
    /// `L`-dimensional restriction to treatment 1's statistics.
    pub fn rejection_probability_h01(&self, tau1: f64) -> Result<f64> {
        Ok(self.rejection_probability_restricted(tau1)?.0)
    }

    fn rejection_probability_restricted(&self, tau1: f64) -> Result<(f64, f64)> {
        if !tau1.is_finite() {
            return Err(Error::InvalidInput("treatment effect must be finite".into()));
        }
        let drift: Vec<f64> = self.joint.restrict_to_treatment(1).mean(&[tau1]);
        single_rejection_probability(&drift, &self.design.futility, &self.design.efficacy, &self.opts, self.seed)
    }

    /// `(E(N | tau), E(O | tau))`.
    pub fn expected_counts(&self, tau: &[f64]) -> Result<(f64, f64)> {
        let paths = self.path_probabilities(tau)?;
        Ok(self.counts_from(&paths))
    }

    fn counts_from(&self, paths: &[(StoppingPath, IntegrationResult)]) -> (f64, f64) {
        let n = self.design.group_size;
        let (en, eo, total) = paths.iter().fold((0.0, 0.0, 0.0), |(en, eo, t), (path, r)| {
            (en + r.value * path.sample_size(n) as f64, eo + r.value * path.observations(n) as f64, t + r.value)
        });
        // Path probabilities carry independent integration error; normalise
        // so the weights sum to one.
        if total > 0.0 {
            (en / total, eo / total)
        } else {
            (en, eo)
        }
    }

    pub fn characteristics(&self, tau: &[f64]) -> Result<OperatingCharacteristics> {
        let paths = self.path_probabilities(tau)?;
        let k = self.design.experimental();
        let mut power_any = 0.0;
        let mut fwer_at = 0.0;
        let mut reject_each = vec![0.0; k];
        let mut err = 0.0;
        for (path, r) in &paths {
            err += r.error_estimate;
            if path.rejects_any() {
                power_any += r.value;
            }
            if (0..k).any(|d| path.psi[d] && tau[d] <= 0.0) {
                fwer_at += r.value;
            }
            for (slot, &rejected) in reject_each.iter_mut().zip(&path.psi) {
                if rejected {
                    *slot += r.value;
                }
            }
        }
        let (expected_n, expected_o) = self.counts_from(&paths);
        let (reject_h01, err_h01) = self.rejection_probability_restricted(tau[0])?;
        Ok(OperatingCharacteristics {
            tau: tau.to_vec(),
            fwer_at: fwer_at.clamp(0.0, 1.0),
            reject_h01: reject_h01.clamp(0.0, 1.0),
            power_any: power_any.clamp(0.0, 1.0),
            reject_each,
            expected_n,
            expected_o,
            max_n: self.design.max_n(),
            max_o: self.design.max_o(),
            integration_error: err + err_h01,
        })
    }

    /// Characteristics at `tau = (theta, ..., theta)` for each grid value.
    pub fn characteristics_curve(&self, thetas: &[f64]) -> Result<Vec<CurvePoint>> {
        thetas
            .iter()
            .map(|&theta| {
                let tau = vec![theta; self.design.experimental()];
                let paths = self.path_probabilities(&tau)?;
                let reject_any: f64 = paths.iter().filter(|(p, _)| p.rejects_any()).map(|(_, r)| r.value).sum();
                let (expected_n, expected_o) = self.counts_from(&paths);
                Ok(CurvePoint {
                    theta,
                    reject_h01: self.rejection_probability_h01(theta)?,
                    reject_any: reject_any.clamp(0.0, 1.0),
                    expected_n,
                    expected_o,
                })
            })
            .collect()
    }
}

/// Probability that no null is rejected, for statistics with the given
/// joint law and means. Sums the `L^(D-1)` all-futility paths; when the
/// means are equal across treatments the law is exchangeable, and only one
/// path per multiset of exit stages is integrated. Returns the probability
/// and the summed error estimate.
pub fn no_rejection_probability(
    joint: &JointDistribution,
    mean: &[f64],
    futility: &[f64],
    efficacy: &[f64],
    opts: &MvnOptions,
    seed: u64,
) -> Result<(f64, f64)> {
    let (k, stages) = (joint.treatments - 1, joint.stages);
    let exchangeable = mean.chunks(k).all(|c| c.iter().all(|&m| m == c[0]));
    let total = stages.pow(k as u32);
    let classes: Vec<(Vec<usize>, f64)> = (0..total)
        .filter_map(|mut i| {
            let omega: Vec<usize> = (0..k)
                .map(|_| {
                    let w = i % stages + 1;
                    i /= stages;
                    w
                })
                .collect();
            if !exchangeable {
                return Some((omega, 1.0));
            }
            if omega.windows(2).any(|w| w[0] > w[1]) {
                return None;
            }
            Some((omega.clone(), permutations(&omega)))
        })
        .collect();
    let results: Vec<(IntegrationResult, f64)> = classes
        .into_par_iter()
        .map(|(omega, weight)| {
            let path = StoppingPath::new(omega, vec![false; k]);
            let mut lower = vec![0.0; k * stages];
            let mut upper = vec![0.0; k * stages];
            for l in 1..=stages {
                for d in 0..k {
                    let (lo, hi) = stage_limits(l, path.omega[d], false, futility, efficacy);
                    lower[(l - 1) * k + d] = lo;
                    upper[(l - 1) * k + d] = hi;
                }
            }
            let problem = RectangleProblem::new(mean.to_vec(), joint.correlation.clone(), lower, upper)?;
            let r = mvn_rectangle_with(&problem, opts, mix_seed(seed, path.index(stages) as u64))?;
            Ok((r, weight))
        })
        .collect::<Result<_>>()?;
    Ok(results.iter().fold((0.0, 0.0), |(p, e), (r, w)| (p + w * r.value, e + w * r.error_estimate)))
}

/// Distinct orderings of a sorted label vector.
fn permutations(sorted: &[usize]) -> f64 {
    let factorial = |m: usize| (1..=m).map(|v| v as f64).product::<f64>();
    let mut denom = 1.0;
    let mut run = 1;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            denom *= factorial(run);
            run = 1;
        }
    }
    denom *= factorial(run);
    factorial(sorted.len()) / denom
}

/// Probability that a single treatment's null is rejected when its
/// statistics have means `drift` (one per stage) and the canonical
/// correlation `sqrt(l1 / l2)`.
pub fn single_rejection_probability(
    drift: &[f64],
    futility: &[f64],
    efficacy: &[f64],
    opts: &MvnOptions,
    seed: u64,
) -> Result<(f64, f64)> {
    let stages = drift.len();
    let corr = nalgebra::DMatrix::from_fn(stages, stages, |a, b| {
        let (lo, hi) = (a.min(b) + 1, a.max(b) + 1);
        (lo as f64 / hi as f64).sqrt()
    });
    let mut total = (0.0, 0.0);
    for omega in 1..=stages {
        let (lower, upper): (Vec<f64>, Vec<f64>) =
            (1..=stages).map(|l| stage_limits(l, omega, true, futility, efficacy)).unzip();
        let problem = RectangleProblem::new(drift.to_vec(), corr.clone(), lower, upper)?;
        let r = mvn_rectangle_with(&problem, opts, mix_seed(seed ^ 0x5A5A, omega as u64))?;
        total.0 += r.value;
        total.1 += r.error_estimate;
    }
    Ok(total)
}

/// Grid of `points` values evenly spanning `[min, max]`.
pub fn theta_grid(min: f64, max: f64, points: usize) -> Result<Vec<f64>> {
    if points == 0 || !min.is_finite() || !max.is_finite() {
        return Err(Error::InvalidInput("grid needs finite limits and at least one point".into()));
    }
    if points == 1 {
        if min != max {
            return Err(Error::InvalidInput("a single-point grid needs min == max".into()));
        }
        return Ok(vec![min]);
    }
    if !(max > min) {
        return Err(Error::InvalidInput("grid maximum must exceed its minimum".into()));
    }
    let step = (max - min) / (points - 1) as f64;
    Ok((0..points).map(|i| min + step * i as f64).collect())
}

/// Default curve grid: 101 points over `[-delta/2, 3 delta/2]`.
pub fn default_theta_grid(delta: f64) -> Vec<f64> {
    theta_grid(-0.5 * delta, 1.5 * delta, 101).expect("valid default grid")
}
