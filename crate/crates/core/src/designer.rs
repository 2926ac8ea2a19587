//! Power-family stopping boundaries and group size search.
//!
//! Boundaries follow the one-sided power family with futility stopping:
//!
//! ```text
//! e_l = C_e (l/L)^(Delta - 1/2)
//! f_l = delta sqrt(I_l) - C_f (l/L)^(Delta - 1/2),   I_l = l n / (2 sigma_e^2)
//! ```
//!
//! The closure `f_L = e_L` ties `C_f = delta sqrt(I_L) - C_e`, so for a
//! given `n` only `C_e` is free. The solver nests two monotone root
//! searches: for each candidate `n`, `C_e` is chosen so the familywise
//! error at the global null is `alpha`; the outer search moves `n` until the
//! power for `H_01` at `tau_1 = delta` is `1 - beta`. The exact size is
//! then rounded up so every sequence set divides it.

use serde::{Deserialize, Serialize};

use crate::covariance::joint_distribution;
use crate::error::{Error, Result};
use crate::evaluator::{no_rejection_probability, single_rejection_probability, TrialDesign};
use crate::mvn::{norm_quantile, MvnOptions};
use crate::sequences::{lcm_group_size, SequenceFamily};

/// Inputs of a power-family design search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFamilySpec {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub sigma_e_sq: f64,
    pub stages: usize,
    /// Shape parameter `Delta`.
    pub shape: f64,
    pub treatments: usize,
    pub family: SequenceFamily,
}

impl Default for PowerFamilySpec {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.2,
            delta: 1.11,
            sigma_e_sq: 6.51,
            stages: 3,
            shape: 0.0,
            treatments: 4,
            family: SequenceFamily::Williams,
        }
    }
}

impl PowerFamilySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.sigma_e_sq > 0.0 && self.sigma_e_sq.is_finite()) {
            return bad(format!("sigma_e^2 must be positive, got {}", self.sigma_e_sq));
        }
        if self.stages < 1 {
            return bad("need at least one stage".into());
        }
        if self.treatments < 2 {
            return bad(format!("need at least 2 treatments, got {}", self.treatments));
        }
        if !self.shape.is_finite() {
            return bad("shape must be finite".into());
        }
        Ok(())
    }
}

/// Solver tolerances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub mvn: MvnOptions,
    pub seed: u64,
    /// Absolute tolerance on `C_e`.
    pub constant_tol: f64,
    /// Relative tolerance on the exact group size.
    pub n_rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { mvn: MvnOptions::with_tol(1e-5), seed: 20170101, constant_tol: 1e-5, n_rel_tol: 1e-5, max_iter: 200 }
    }
}

/// A solved design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySolution {
    pub design: TrialDesign,
    /// Real-valued group size solving both error-rate equations.
    pub exact_n: f64,
    /// Constants at the exact group size.
    pub exact_ce: f64,
    pub exact_cf: f64,
    /// Constants behind the design's boundaries (equal to the exact ones
    /// unless the rounding rule re-solves them).
    pub ce: f64,
    pub cf: f64,
    pub achieved_alpha: f64,
    pub achieved_beta: f64,
}

/// Stage scale factor `(l/L)^(Delta - 1/2)`.
pub fn boundary_shape(l: usize, stages: usize, shape: f64) -> f64 {
    debug_assert!(l >= 1 && l <= stages);
    (l as f64 / stages as f64).powf(shape - 0.5)
}

/// Boundaries `(futility, efficacy)` at real group size `n` and efficacy
/// constant `ce`, with `C_f` fixed by the closure. Futility values that
/// would cross the efficacy boundary are capped at it.
pub fn power_family_boundaries(spec: &PowerFamilySpec, n: f64, ce: f64) -> (Vec<f64>, Vec<f64>) {
    let stages = spec.stages;
    let drift = |l: usize| spec.delta * (l as f64 * n / (2.0 * spec.sigma_e_sq)).sqrt();
    let cf = drift(stages) - ce;
    let mut futility = Vec::with_capacity(stages);
    let mut efficacy = Vec::with_capacity(stages);
    for l in 1..=stages {
        let s = boundary_shape(l, stages, spec.shape);
        let e = ce * s;
        let f = if l == stages { e } else { (drift(l) - cf * s).min(e) };
        futility.push(f);
        efficacy.push(e);
    }
    (futility, efficacy)
}

fn futility_constant(spec: &PowerFamilySpec, n: f64, ce: f64) -> f64 {
    spec.delta * (spec.stages as f64 * n / (2.0 * spec.sigma_e_sq)).sqrt() - ce
}

/// Familywise error at the global null for the given boundaries.
pub fn null_fwer(spec: &PowerFamilySpec, futility: &[f64], efficacy: &[f64], opts: &SolverOptions) -> Result<f64> {
    // At tau = 0 the means vanish and the group size drops out.
    let joint = joint_distribution(spec.treatments, spec.stages, 1, spec.sigma_e_sq);
    let mean = vec![0.0; joint.dimension()];
    let (p, _) = no_rejection_probability(&joint, &mean, futility, efficacy, &opts.mvn, opts.seed)?;
    Ok((1.0 - p).clamp(0.0, 1.0))
}

/// Power for `H_01` at `tau_1 = delta` and real group size `n`.
pub fn power_at_delta(
    spec: &PowerFamilySpec,
    n: f64,
    futility: &[f64],
    efficacy: &[f64],
    opts: &SolverOptions,
) -> Result<f64> {
    let drift: Vec<f64> =
        (1..=spec.stages).map(|l| spec.delta * (l as f64 * n / (2.0 * spec.sigma_e_sq)).sqrt()).collect();
    let (p, _) = single_rejection_probability(&drift, futility, efficacy, &opts.mvn, opts.seed)?;
    Ok(p)
}

/// Illinois-modified regula falsi on a sign-changing bracket.
fn find_root<F>(f: F, mut a: f64, mut b: f64, mut fa: f64, mut fb: f64, x_tol: f64, max_iter: usize) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::NoConvergence(format!("root not bracketed on [{a}, {b}] (values {fa}, {fb})")));
    }
    let mut side = 0i8;
    for _ in 0..max_iter {
        let c = (a * fb - b * fa) / (fb - fa);
        // Fall back to bisection if the secant point degenerates.
        let c = if c.is_finite() && c > a.min(b) && c < a.max(b) { c } else { 0.5 * (a + b) };
        let fc = f(c)?;
        if fc == 0.0 || (b - a).abs() < x_tol {
            return Ok(c);
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
        if (b - a).abs() < x_tol {
            return Ok(0.5 * (a + b));
        }
    }
    Err(Error::NoConvergence(format!("root search stalled on [{a}, {b}] after {max_iter} iterations")))
}

/// Efficacy constant giving familywise error `alpha` at group size `n`.
pub fn solve_efficacy_constant(spec: &PowerFamilySpec, n: f64, opts: &SolverOptions) -> Result<f64> {
    let guess = norm_quantile(1.0 - spec.alpha / (spec.treatments - 1) as f64);
    solve_efficacy_constant_from(spec, n, guess, opts)
}

/// As [`solve_efficacy_constant`], bracketing outward from `guess`.
pub fn solve_efficacy_constant_from(spec: &PowerFamilySpec, n: f64, guess: f64, opts: &SolverOptions) -> Result<f64> {
    let g = |ce: f64| -> Result<f64> {
        let (f, e) = power_family_boundaries(spec, n, ce);
        Ok(null_fwer(spec, &f, &e, opts)? - spec.alpha)
    };
    // The error rate falls as C_e grows: both boundaries move up.
    let (a, b, ga, gb) = bracket(&g, guess.max(0.0), 0.05, true)?;
    find_root(g, a, b, ga, gb, opts.constant_tol, opts.max_iter)
}

/// Steps out from `x0` by a doubling `step` until `f` changes sign.
/// `decreasing` says which way the function slopes.
fn bracket<F>(f: &F, x0: f64, step: f64, decreasing: bool) -> Result<(f64, f64, f64, f64)>
where
    F: Fn(f64) -> Result<f64>,
{
    let f0 = f(x0)?;
    if f0 == 0.0 {
        return Ok((x0, x0, f0, f0));
    }
    // Move right when the value is positive on a decreasing function.
    let right = (f0 > 0.0) == decreasing;
    let mut h = step * x0.abs().max(1.0);
    let (mut x, mut fx) = (x0, f0);
    for _ in 0..60 {
        let next = if right { x + h } else { (x - h).max(0.0) };
        let fn_ = f(next)?;
        if fn_.signum() != f0.signum() || fn_ == 0.0 {
            return Ok(if right { (x, next, fx, fn_) } else { (next, x, fn_, fx) });
        }
        if next == 0.0 {
            break;
        }
        x = next;
        fx = fn_;
        h *= 2.0;
    }
    Err(Error::NoConvergence(format!("could not bracket a root starting from {x0}")))
}

/// Boundaries solved to hold `alpha` exactly at a fixed integer group size.
pub fn solve_at_group_size(spec: &PowerFamilySpec, n: usize, opts: &SolverOptions) -> Result<BoundarySolution> {
    spec.validate()?;
    let nf = n as f64;
    let ce = solve_efficacy_constant(spec, nf, opts)?;
    let (futility, efficacy) = power_family_boundaries(spec, nf, ce);
    let achieved_alpha = null_fwer(spec, &futility, &efficacy, opts)?;
    let power = power_at_delta(spec, nf, &futility, &efficacy, opts)?;
    let cf = futility_constant(spec, nf, ce);
    Ok(BoundarySolution {
        design: design_from(spec, n, futility, efficacy),
        exact_n: nf,
        exact_ce: ce,
        exact_cf: cf,
        ce,
        cf,
        achieved_alpha,
        achieved_beta: 1.0 - power,
    })
}

/// Real group size at which the `alpha`-calibrated boundaries give power
/// `1 - beta`, with the efficacy constant there.
pub fn solve_exact_group_size(spec: &PowerFamilySpec, opts: &SolverOptions) -> Result<(f64, f64)> {
    spec.validate()?;
    let target = 1.0 - spec.beta;
    let last_ce = std::cell::Cell::new(norm_quantile(1.0 - spec.alpha / (spec.treatments - 1) as f64));
    let h = |n: f64| -> Result<f64> {
        let ce = solve_efficacy_constant_from(spec, n, last_ce.get(), opts)?;
        last_ce.set(ce);
        let (f, e) = power_family_boundaries(spec, n, ce);
        Ok(power_at_delta(spec, n, &f, &e, opts)? - target)
    };
    // Fixed-sample Bonferroni size as the starting scale; power rises in n.
    let z = norm_quantile(1.0 - spec.alpha / (spec.treatments - 1) as f64) + norm_quantile(target);
    let n0 = 2.0 * spec.sigma_e_sq * z * z / (spec.delta * spec.delta);
    let (a, b, ha, hb) = bracket(&h, n0, 0.1, false)?;
    let n = find_root(h, a, b, ha, hb, opts.n_rel_tol * n0, opts.max_iter)?;
    let ce = solve_efficacy_constant_from(spec, n, last_ce.get(), opts)?;
    Ok((n, ce))
}

/// How boundaries are set once the exact group size is rounded up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingRule {
    /// Keep the boundary values solved at the exact size. The null error
    /// rate does not depend on `n`, so `alpha` is held and power rises.
    #[default]
    KeepBoundaries,
    /// Re-solve the constants at the rounded size, holding `alpha`.
    Resolve,
}

/// Full search: exact size, then rounding up to a multiple of the
/// sequence-set LCM.
pub fn solve_boundaries(spec: &PowerFamilySpec, rule: RoundingRule, opts: &SolverOptions) -> Result<BoundarySolution> {
    let multiple = lcm_group_size(spec.treatments, spec.family);
    solve_with_rounding(spec, rule, opts, multiple)
}

/// Single-stage design. The group size is rounded up to the next integer,
/// or to the next multiple of the sequence-set LCM when `divisible` is set.
pub fn single_stage_design(spec: &PowerFamilySpec, divisible: bool, opts: &SolverOptions) -> Result<BoundarySolution> {
    if spec.stages != 1 {
        return Err(Error::InvalidInput(format!("single-stage design requested with {} stages", spec.stages)));
    }
    let multiple = if divisible { lcm_group_size(spec.treatments, spec.family) } else { 1 };
    solve_with_rounding(spec, RoundingRule::KeepBoundaries, opts, multiple)
}

fn solve_with_rounding(
    spec: &PowerFamilySpec,
    rule: RoundingRule,
    opts: &SolverOptions,
    multiple: usize,
) -> Result<BoundarySolution> {
    let (exact_n, exact_ce) = solve_exact_group_size(spec, opts)?;
    let exact_cf = futility_constant(spec, exact_n, exact_ce);
    let m = multiple as f64;
    let n = (((exact_n - 1e-9) / m).ceil() * m).max(m) as usize;
    let mut sol = match rule {
        RoundingRule::Resolve => solve_at_group_size(spec, n, opts)?,
        RoundingRule::KeepBoundaries => {
            let (futility, efficacy) = power_family_boundaries(spec, exact_n, exact_ce);
            let achieved_alpha = null_fwer(spec, &futility, &efficacy, opts)?;
            let power = power_at_delta(spec, n as f64, &futility, &efficacy, opts)?;
            BoundarySolution {
                design: design_from(spec, n, futility, efficacy),
                exact_n,
                exact_ce,
                exact_cf,
                ce: exact_ce,
                cf: exact_cf,
                achieved_alpha,
                achieved_beta: 1.0 - power,
            }
        }
    };
    sol.exact_n = exact_n;
    sol.exact_ce = exact_ce;
    sol.exact_cf = exact_cf;
    Ok(sol)
}

fn design_from(spec: &PowerFamilySpec, n: usize, futility: Vec<f64>, efficacy: Vec<f64>) -> TrialDesign {
    TrialDesign {
        treatments: spec.treatments,
        stages: spec.stages,
        group_size: n,
        futility,
        efficacy,
        sigma_e_sq: spec.sigma_e_sq,
        sigma_b_sq: None,
        family: spec.family,
        delta: spec.delta,
        alpha: spec.alpha,
        beta: spec.beta,
    }
}
