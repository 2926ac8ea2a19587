//! Patient-level simulation of complete trials.
//!
//! Each stage draws responses for the treatments still in the trial, the
//! linear mixed model is refitted on everything collected so far, and the
//! stopping rules are applied to the resulting Wald statistics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, StudentsT};

use crate::covariance::VarianceComponents;
use crate::error::{Error, Result};
use crate::evaluator::{StoppingPath, TrialDesign};
use crate::mvn::norm_cdf;
use crate::sequences::{design_matrix, generate_sequence_set};

/// Range searched for `ln(sigma_b^2 / sigma_e^2)`.
const LOG_RATIO_RANGE: (f64, f64) = (-12.0, 12.0);
const GRID_STEP: f64 = 0.5;
const GOLDEN_TOL: f64 = 1e-7;
const GOLDEN_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimation {
    Ml,
    Reml,
    /// Variance components fixed at their true values.
    Known,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryAdjustment {
    None,
    QuantileSubstitution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnalysisProcedure {
    pub estimation: Estimation,
    pub adjustment: BoundaryAdjustment,
}

impl AnalysisProcedure {
    /// Procedures 1 to 4: ML, ML adjusted, REML, REML adjusted.
    pub fn numbered(k: u8) -> Result<Self> {
        let (estimation, adjustment) = match k {
            1 => (Estimation::Ml, BoundaryAdjustment::None),
            2 => (Estimation::Ml, BoundaryAdjustment::QuantileSubstitution),
            3 => (Estimation::Reml, BoundaryAdjustment::None),
            4 => (Estimation::Reml, BoundaryAdjustment::QuantileSubstitution),
            _ => return Err(Error::InvalidInput(format!("procedure must be 1-4, got {k}"))),
        };
        Ok(Self { estimation, adjustment })
    }

    pub fn number(&self) -> Option<u8> {
        (1..=4).find(|&k| Self::numbered(k).ok() == Some(*self))
    }

    pub fn known_variance() -> Self {
        Self { estimation: Estimation::Known, adjustment: BoundaryAdjustment::None }
    }
}

/// Parameters the data are generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParameters {
    pub mu0: f64,
    /// `pi_2 .. pi_D`.
    pub periods: Vec<f64>,
    /// `tau_1 .. tau_{D-1}`.
    pub tau: Vec<f64>,
    pub sigma_b_sq: f64,
    pub sigma_e_sq: f64,
}

impl TrueParameters {
    /// Zero fixed effects apart from `tau`.
    pub fn null(treatments: usize, sigma_b_sq: f64, sigma_e_sq: f64) -> Self {
        Self { mu0: 0.0, periods: vec![0.0; treatments - 1], tau: vec![0.0; treatments - 1], sigma_b_sq, sigma_e_sq }
    }

    pub fn beta(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(1 + self.periods.len() + self.tau.len());
        b.push(self.mu0);
        b.extend(&self.periods);
        b.extend(&self.tau);
        b
    }

    fn check(&self, treatments: usize) -> Result<VarianceComponents> {
        if self.periods.len() != treatments - 1 || self.tau.len() != treatments - 1 {
            return Err(Error::InvalidInput(format!(
                "need {} period and treatment effects, got {} and {}",
                treatments - 1,
                self.periods.len(),
                self.tau.len()
            )));
        }
        if !self.beta().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("fixed effects must be finite".into()));
        }
        if !(self.sigma_b_sq >= 0.0 && self.sigma_b_sq.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma_b^2 must be non-negative, got {}", self.sigma_b_sq)));
        }
        // A zero between-patient variance is a valid truth for generation;
        // fitting with known components needs a positive one.
        VarianceComponents::new(self.sigma_b_sq.max(f64::MIN_POSITIVE), self.sigma_e_sq)
    }
}

/// One simulated patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: usize,
    pub stage: usize,
    /// Index into the stage's sequence set.
    pub sequence_index: usize,
    /// Treatment received in each period, in original labels.
    pub treatments: Vec<usize>,
    pub responses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub sigma_b_sq_hat: f64,
    pub sigma_e_sq_hat: f64,
    pub tau_hat: Vec<f64>,
    /// Inverse variance of each `tau_hat`.
    pub observed_information: Vec<f64>,
    /// Between-patient variance estimated at the lower limit.
    pub boundary: bool,
}

impl FitResult {
    pub fn statistics(&self) -> Vec<f64> {
        self.tau_hat.iter().zip(&self.observed_information).map(|(t, i)| t * i.sqrt()).collect()
    }
}

/// Draws one stage of patients on the treatments in `remaining`
/// (original labels, control first, ascending).
pub fn generate_stage_data<R: Rng + ?Sized>(
    design: &TrialDesign,
    params: &TrueParameters,
    remaining: &[usize],
    stage: usize,
    first_id: usize,
    rng: &mut R,
) -> Result<Vec<PatientRecord>> {
    let d = design.treatments;
    params.check(d)?;
    if remaining.first() != Some(&0) || remaining.windows(2).any(|w| w[0] >= w[1]) || remaining.iter().any(|&t| t >= d)
    {
        return Err(Error::InvalidInput(format!(
            "remaining treatments {remaining:?} must be ascending, start with the control and lie below {d}"
        )));
    }
    let r = remaining.len();
    let set = generate_sequence_set(r, design.family)?;
    let n = design.group_size;
    if !n.is_multiple_of(set.size()) {
        return Err(Error::Divisibility { n, r, size: set.size() });
    }
    let per_sequence = n / set.size();
    let beta = DVector::from_vec(params.beta());
    let sd_b = params.sigma_b_sq.sqrt();
    let sd_e = params.sigma_e_sq.sqrt();
    let mut out = Vec::with_capacity(n);
    for (k, seq) in set.sequences().iter().enumerate() {
        let treatments: Vec<usize> = seq.iter().map(|&t| remaining[t]).collect();
        let mean = design_matrix(&treatments, d)? * &beta;
        for _ in 0..per_sequence {
            let b = sd_b * rng.sample::<f64, _>(StandardNormal);
            let responses = mean.iter().map(|m| m + b + sd_e * rng.sample::<f64, _>(StandardNormal)).collect();
            out.push(PatientRecord {
                id: first_id + out.len(),
                stage,
                sequence_index: k,
                treatments: treatments.clone(),
                responses,
            });
        }
    }
    Ok(out)
}

/// Sufficient statistics for the profiled likelihood. With
/// `Sigma_i = sigma_e^2 (I + rho J)` the weight is `I - c_r J`,
/// `c_r = rho / (1 + r rho)`, so everything reduces to per-`r` sums.
struct Sufficient {
    p: usize,
    obs: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    /// Per period count `r`: subjects, `sum u u^T`, `sum u s`, `sum s^2`
    /// with `u = X^T 1` and `s = 1^T y`.
    by_r: Vec<(usize, usize, DMatrix<f64>, DVector<f64>, f64)>,
}

impl Sufficient {
    fn new(data: &[PatientRecord], d: usize) -> Result<Self> {
        let p = 2 * d - 1;
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        let mut yty = 0.0;
        let mut obs = 0;
        let mut by_r: Vec<(usize, usize, DMatrix<f64>, DVector<f64>, f64)> = Vec::new();
        for rec in data {
            if rec.responses.len() != rec.treatments.len() {
                return Err(Error::InvalidInput(format!(
                    "patient {} has {} responses for {} periods",
                    rec.id,
                    rec.responses.len(),
                    rec.treatments.len()
                )));
            }
            let x = design_matrix(&rec.treatments, d)?;
            let y = DVector::from_column_slice(&rec.responses);
            let r = y.len();
            obs += r;
            xtx += x.transpose() * &x;
            xty += x.transpose() * &y;
            yty += y.dot(&y);
            let u: DVector<f64> = x.row_sum().transpose();
            let s = y.sum();
            let slot = match by_r.iter().position(|e| e.0 == r) {
                Some(i) => i,
                None => {
                    by_r.push((r, 0, DMatrix::zeros(p, p), DVector::zeros(p), 0.0));
                    by_r.len() - 1
                }
            };
            let e = &mut by_r[slot];
            e.1 += 1;
            e.2 += &u * u.transpose();
            e.3 += &u * s;
            e.4 += s * s;
        }
        if obs <= p {
            return Err(Error::InvalidInput(format!("{obs} observations for {p} fixed effects")));
        }
        Ok(Self { p, obs, xtx, xty, yty, by_r })
    }

    /// GLS pieces at ratio `rho`: Cholesky-solved `beta`, weighted RSS,
    /// `log|X^T W X|` and `sum log(1 + r rho)`.
    fn gls(&self, rho: f64) -> Result<Gls> {
        let mut a = self.xtx.clone();
        let mut b = self.xty.clone();
        let mut rss = self.yty;
        let mut log_v = 0.0;
        for (r, count, uu, us, ss) in &self.by_r {
            let c = rho / (1.0 + *r as f64 * rho);
            a -= uu * c;
            b -= us * c;
            rss -= c * ss;
            log_v += *count as f64 * (*r as f64 * rho).ln_1p();
        }
        let chol = a.clone().cholesky().ok_or(Error::Singular { rcond: 0.0 })?;
        let beta = chol.solve(&b);
        rss -= b.dot(&beta);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Gls { beta, rss: rss.max(0.0), log_det, log_v, chol })
    }

    /// Minus twice the profiled (restricted) log-likelihood, up to a constant.
    fn objective(&self, rho: f64, reml: bool) -> Result<f64> {
        let g = self.gls(rho)?;
        let n = self.obs as f64;
        let dof = if reml { n - self.p as f64 } else { n };
        let mut v = dof * (g.rss / dof).ln() + g.log_v;
        if reml {
            v += g.log_det;
        }
        Ok(v)
    }
}

struct Gls {
    beta: DVector<f64>,
    rss: f64,
    log_det: f64,
    log_v: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn finish_fit(stats: &Sufficient, d: usize, rho: f64, sigma_e_sq: f64, boundary: bool) -> Result<FitResult> {
    let g = stats.gls(rho)?;
    let inv = g.chol.inverse();
    let k = d - 1;
    let tau_hat: Vec<f64> = (0..k).map(|t| g.beta[d + t]).collect();
    let observed_information: Vec<f64> = (0..k).map(|t| 1.0 / (sigma_e_sq * inv[(d + t, d + t)])).collect();
    if observed_information.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Singular { rcond: 0.0 });
    }
    Ok(FitResult {
        beta_hat: g.beta,
        sigma_b_sq_hat: rho * sigma_e_sq,
        sigma_e_sq_hat: sigma_e_sq,
        tau_hat,
        observed_information,
        boundary,
    })
}

/// Fits the mixed model by ML or REML, profiling `sigma_e^2` and searching
/// the variance ratio on a log scale.
pub fn fit_lmm(data: &[PatientRecord], d: usize, estimation: Estimation) -> Result<FitResult> {
    let reml = match estimation {
        Estimation::Ml => false,
        Estimation::Reml => true,
        Estimation::Known => return Err(Error::InvalidInput("known-variance fits go through fit_known".into())),
    };
    let stats = Sufficient::new(data, d)?;
    let f = |t: f64| stats.objective(t.exp(), reml);

    let (lo, hi) = LOG_RATIO_RANGE;
    let steps = ((hi - lo) / GRID_STEP).round() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| lo + i as f64 * GRID_STEP).collect();
    let values = grid.iter().map(|&t| f(t)).collect::<Result<Vec<_>>>()?;
    let best = values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap();

    let t_hat =
        if best == 0 || best == steps { grid[best] } else { golden_section(&f, grid[best - 1], grid[best + 1])? };
    let mut rho = t_hat.exp();
    let mut boundary = best == steps || t_hat <= lo + GOLDEN_TOL;
    // The ratio may sit at zero: compare against the exact boundary value.
    if stats.objective(0.0, reml)? <= f(t_hat)? {
        rho = 0.0;
        boundary = true;
    }
    let g = stats.gls(rho)?;
    let dof = if reml { stats.obs - stats.p } else { stats.obs };
    let sigma_e_sq = g.rss / dof as f64;
    if !(sigma_e_sq > 0.0) {
        return Err(Error::NoConvergence("residual variance estimate is zero".into()));
    }
    finish_fit(&stats, d, rho, sigma_e_sq, boundary)
}

/// GLS fit with the variance components fixed.
pub fn fit_known(data: &[PatientRecord], d: usize, vc: &VarianceComponents) -> Result<FitResult> {
    let stats = Sufficient::new(data, d)?;
    finish_fit(&stats, d, vc.sigma_b_sq() / vc.sigma_e_sq(), vc.sigma_e_sq(), false)
}

fn golden_section<F>(f: &F, mut a: f64, mut b: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..GOLDEN_MAX_ITER {
        if (b - a).abs() < GOLDEN_TOL {
            return Ok(0.5 * (a + b));
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Err(Error::NoConvergence(format!("variance ratio search did not converge on [{a}, {b}]")))
}

/// Student-t quantile at the normal probability of `boundary`.
pub fn quantile_substitute(boundary: f64, df: f64) -> Result<f64> {
    if !(df >= 1.0) {
        return Err(Error::InvalidInput(format!("degrees of freedom must be at least 1, got {df}")));
    }
    if boundary == 0.0 || boundary.is_infinite() {
        return Ok(boundary);
    }
    let t = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidInput(e.to_string()))?;
    // Work in the lower tail for accuracy, then restore the sign.
    let tail = norm_cdf(-boundary.abs());
    if tail <= 0.0 {
        return Ok(boundary);
    }
    Ok(-t_lower_quantile(&t, df, tail) * boundary.signum())
}

/// Lower-tail Student-t quantile for `p < 1/2`. The incomplete-beta
/// inversion loses accuracy for very large `df`, so the start comes from a
/// Cornish-Fisher expansion there, and Newton steps on the CDF finish it.
fn t_lower_quantile(t: &StudentsT, df: f64, p: f64) -> f64 {
    let mut x = if df < 1e3 {
        t.inverse_cdf(p)
    } else {
        let z = crate::mvn::norm_quantile(p);
        z + (z.powi(3) + z) / (4.0 * df) + (5.0 * z.powi(5) + 16.0 * z.powi(3) + 3.0 * z) / (96.0 * df * df)
    };
    for _ in 0..4 {
        let dens = t.pdf(x);
        if !(dens > 0.0) {
            break;
        }
        let step = (t.cdf(x) - p) / dens;
        x -= step;
        if step.abs() < 1e-14 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Within-patient degrees of freedom after the stages in
/// `remaining_per_stage` (arms in each stage, control included):
/// observations minus patients minus the `2(D-1)` period and treatment
/// effects. Floored at 1.
pub fn anova_df(n: usize, d: usize, remaining_per_stage: &[usize]) -> usize {
    let o: usize = remaining_per_stage.iter().map(|r| n * r).sum();
    let subjects = n * remaining_per_stage.len();
    let df = o as i64 - subjects as i64 - 2 * (d as i64 - 1);
    if df < 1 {
        log::warn!("degrees of freedom {df} floored at 1");
        1
    } else {
        df as usize
    }
}

/// Result of one simulated trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub path: StoppingPath,
    pub sample_size: usize,
    pub observations: usize,
    /// Fits whose between-patient variance landed on the boundary.
    pub boundary_fits: usize,
    /// Statistics computed at each stage run, `None` once a treatment left.
    pub statistics: Vec<Vec<Option<f64>>>,
}

/// Runs one trial through all of its stages.
pub fn run_trial<R: Rng + ?Sized>(
    design: &TrialDesign,
    params: &TrueParameters,
    procedure: AnalysisProcedure,
    rng: &mut R,
) -> Result<TrialOutcome> {
    let d = design.treatments;
    let k = d - 1;
    let stages = design.stages;
    let truth = params.check(d)?;
    let mut omega = vec![0usize; k];
    let mut psi = vec![false; k];
    let mut data = Vec::new();
    let mut history = Vec::new();
    let mut boundary_fits = 0;
    let mut statistics = Vec::new();

    for l in 1..=stages {
        let active: Vec<usize> = (0..k).filter(|&t| omega[t] == 0).collect();
        if active.is_empty() {
            break;
        }
        let mut remaining = vec![0];
        remaining.extend(active.iter().map(|t| t + 1));
        let new = generate_stage_data(design, params, &remaining, l, data.len(), rng)?;
        data.extend(new);
        history.push(remaining.len());

        let fit = match procedure.estimation {
            Estimation::Known => fit_known(&data, d, &truth)?,
            e => fit_lmm(&data, d, e)?,
        };
        boundary_fits += usize::from(fit.boundary);
        let (mut f, mut e) = (design.futility[l - 1], design.efficacy[l - 1]);
        if procedure.adjustment == BoundaryAdjustment::QuantileSubstitution {
            let df = anova_df(design.group_size, d, &history) as f64;
            f = quantile_substitute(f, df)?;
            e = quantile_substitute(e, df)?;
        }
        let z = fit.statistics();
        let mut row = vec![None; k];
        for &t in &active {
            row[t] = Some(z[t]);
            if z[t] >= e {
                omega[t] = l;
                psi[t] = true;
            } else if z[t] < f || l == stages {
                omega[t] = l;
            }
        }
        statistics.push(row);
    }
    let path = StoppingPath::new(omega, psi);
    Ok(TrialOutcome {
        sample_size: path.sample_size(design.group_size),
        observations: path.observations(design.group_size),
        path,
        boundary_fits,
        statistics,
    })
}

/// Monte Carlo summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub replicates: usize,
    /// Replicates whose fits failed; excluded from every rate below.
    pub failures: usize,
    pub seed: u64,
    pub procedure: AnalysisProcedure,
    pub reject_any_rate: f64,
    pub reject_any_se: f64,
    pub reject_each: Vec<f64>,
    /// Share of trials whose last stage was `l`, for `l = 1..L`.
    pub stopping_stage: Vec<f64>,
    pub mean_sample_size: f64,
    pub mean_observations: f64,
    pub boundary_fits: usize,
    /// Counts per stopping path, indexed as [`StoppingPath::index`].
    pub path_counts: Vec<u64>,
}

impl SimulationReport {
    pub fn completed(&self) -> usize {
        self.replicates - self.failures
    }
}

/// Generator for replicate `index`: one ChaCha stream per replicate.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Simulates `replicates` trials in parallel; results depend only on `seed`.
pub fn simulate(
    design: &TrialDesign,
    params: &TrueParameters,
    procedure: AnalysisProcedure,
    replicates: usize,
    seed: u64,
) -> Result<SimulationReport> {
    if replicates == 0 {
        return Err(Error::InvalidInput("need at least one replicate".into()));
    }
    design.validate()?;
    params.check(design.treatments)?;
    let outcomes: Vec<Result<TrialOutcome>> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| run_trial(design, params, procedure, &mut replicate_rng(seed, i)))
        .collect();

    let k = design.experimental();
    let stages = design.stages;
    let mut failures = 0;
    let mut reject_any = 0u64;
    let mut reject_each = vec![0u64; k];
    let mut last_stage = vec![0u64; stages];
    let mut sum_n = 0u64;
    let mut sum_o = 0u64;
    let mut boundary_fits = 0;
    let mut path_counts = vec![0u64; StoppingPath::count(k, stages)];
    for outcome in outcomes {
        match outcome {
            Ok(t) => {
                reject_any += u64::from(t.path.rejects_any());
                for (c, &p) in reject_each.iter_mut().zip(&t.path.psi) {
                    *c += u64::from(p);
                }
                let run = t.path.omega.iter().copied().max().unwrap_or(1);
                last_stage[run - 1] += 1;
                sum_n += t.sample_size as u64;
                sum_o += t.observations as u64;
                boundary_fits += t.boundary_fits;
                path_counts[t.path.index(stages)] += 1;
            }
            Err(e) if e.is_numerical() => {
                log::debug!("replicate failed: {e}");
                failures += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if failures > 0 {
        log::warn!("{failures} of {replicates} replicates failed to fit");
    }
    let done = (replicates - failures) as f64;
    let rate = |c: u64| if done > 0.0 { c as f64 / done } else { f64::NAN };
    let p = rate(reject_any);
    Ok(SimulationReport {
        replicates,
        failures,
        seed,
        procedure,
        reject_any_rate: p,
        reject_any_se: (p * (1.0 - p) / done).sqrt(),
        reject_each: reject_each.into_iter().map(rate).collect(),
        stopping_stage: last_stage.into_iter().map(rate).collect(),
        mean_sample_size: sum_n as f64 / done,
        mean_observations: sum_o as f64 / done,
        boundary_fits,
        path_counts,
    })
}
