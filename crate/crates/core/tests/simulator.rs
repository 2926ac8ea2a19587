use std::f64::consts::PI;

use gsxover_core::covariance::sigma_r;
use gsxover_core::evaluator::Evaluator;
use gsxover_core::mvn::norm_cdf;
use gsxover_core::simulator::{
    anova_df, fit_known, fit_lmm, generate_stage_data, quantile_substitute, replicate_rng, simulate, PatientRecord,
};
use gsxover_core::{
    AnalysisProcedure, Estimation, MvnOptions, SequenceFamily, TrialDesign, TrueParameters, VarianceComponents,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const SIGMA_B: f64 = 10.12;
const SIGMA_E: f64 = 6.51;

fn design(treatments: usize, stages: usize, n: usize, f: &[f64], e: &[f64]) -> TrialDesign {
    TrialDesign {
        treatments,
        stages,
        group_size: n,
        futility: f.to_vec(),
        efficacy: e.to_vec(),
        sigma_e_sq: SIGMA_E,
        sigma_b_sq: Some(SIGMA_B),
        family: SequenceFamily::Williams,
        delta: 2.2,
        alpha: 0.05,
        beta: 0.2,
    }
}

fn one_stage(n: usize, d: usize) -> TrialDesign {
    design(d, 1, n, &[2.0], &[2.0])
}

fn params(d: usize) -> TrueParameters {
    TrueParameters {
        mu0: 1.5,
        periods: (1..d).map(|j| 0.2 * j as f64).collect(),
        tau: (1..d).map(|t| 0.5 - 0.3 * t as f64).collect(),
        sigma_b_sq: SIGMA_B,
        sigma_e_sq: SIGMA_E,
    }
}

fn all_arms(d: usize) -> Vec<usize> {
    (0..d).collect()
}

#[test]
fn generated_covariance_matches_model() {
    let d = 4;
    let des = one_stage(100_000, d);
    let truth = TrueParameters::null(d, SIGMA_B, SIGMA_E);
    let vc = VarianceComponents::new(SIGMA_B, SIGMA_E).unwrap();
    for remaining in [vec![0, 1, 2, 3], vec![0, 2]] {
        let r = remaining.len();
        let data = generate_stage_data(&des, &truth, &remaining, 1, 0, &mut replicate_rng(5, r as u64)).unwrap();
        assert_eq!(data.len(), 100_000);
        let m = data.len() as f64;
        let expected = sigma_r(r, &vc);
        for i in 0..r {
            for j in 0..r {
                let cov = data.iter().map(|p| p.responses[i] * p.responses[j]).sum::<f64>() / m;
                let var = expected[(i, i)] * expected[(j, j)] + expected[(i, j)].powi(2);
                let se = (var / m).sqrt();
                assert!((cov - expected[(i, j)]).abs() < 4.0 * se, "r={r} ({i},{j}) {cov}");
            }
        }
    }
}

// Dense design matrix for a record, columns (mu0, pi_2..pi_D, tau_1..tau_{D-1}).
fn dense_row_block(rec: &PatientRecord, d: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(rec.treatments.len(), 2 * d - 1);
    for (j, &t) in rec.treatments.iter().enumerate() {
        x[(j, 0)] = 1.0;
        if j > 0 {
            x[(j, j)] = 1.0;
        }
        if t > 0 {
            x[(j, d - 1 + t)] = 1.0;
        }
    }
    x
}

// Minus twice the (restricted) log-likelihood from dense matrices.
fn dense_objective(data: &[PatientRecord], d: usize, sb: f64, se: f64, reml: bool) -> f64 {
    let p = 2 * d - 1;
    let mut xtvx = DMatrix::zeros(p, p);
    let mut xtvy = DVector::zeros(p);
    let mut log_det_v = 0.0;
    let mut blocks = Vec::new();
    for rec in data {
        let r = rec.treatments.len();
        let v = DMatrix::from_fn(r, r, |i, j| sb + if i == j { se } else { 0.0 });
        log_det_v += v.determinant().ln();
        let vinv = v.try_inverse().unwrap();
        let x = dense_row_block(rec, d);
        let y = DVector::from_column_slice(&rec.responses);
        xtvx += x.transpose() * &vinv * &x;
        xtvy += x.transpose() * &vinv * &y;
        blocks.push((x, y, vinv));
    }
    let beta = xtvx.clone().try_inverse().unwrap() * &xtvy;
    let quad: f64 = blocks
        .iter()
        .map(|(x, y, vinv)| {
            let res = y - x * &beta;
            (res.transpose() * vinv * &res)[(0, 0)]
        })
        .sum();
    let mut v = log_det_v + quad;
    if reml {
        v += xtvx.determinant().ln();
    }
    v
}

fn grid_optimum(data: &[PatientRecord], d: usize, reml: bool) -> (f64, f64, f64) {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=160 {
        let sb = 0.25 * 1.04f64.powi(i);
        for j in 0..=120 {
            let se = 1.0 * 1.02f64.powi(j);
            let v = dense_objective(data, d, sb, se, reml);
            if v < best.0 {
                best = (v, sb, se);
            }
        }
    }
    best
}

#[test]
fn likelihood_fit_matches_dense_oracle() {
    let d = 3;
    let des = one_stage(12, d);
    let truth = params(d);
    let data = generate_stage_data(&des, &truth, &all_arms(d), 1, 0, &mut replicate_rng(8, 0)).unwrap();
    for est in [Estimation::Ml, Estimation::Reml] {
        let reml = est == Estimation::Reml;
        let fit = fit_lmm(&data, d, est).unwrap();
        let at_fit = dense_objective(&data, d, fit.sigma_b_sq_hat, fit.sigma_e_sq_hat, reml);
        let (grid_best, sb, se) = grid_optimum(&data, d, reml);
        assert!(at_fit <= grid_best + 1e-8, "{est:?}: fit {at_fit} grid {grid_best}");
        assert!((fit.sigma_b_sq_hat / sb - 1.0).abs() < 0.05, "{est:?}: {} vs {sb}", fit.sigma_b_sq_hat);
        assert!((fit.sigma_e_sq_hat / se - 1.0).abs() < 0.03, "{est:?}: {} vs {se}", fit.sigma_e_sq_hat);
    }
}

#[test]
fn estimates_are_consistent() {
    let d = 4;
    let n = 1200;
    let truth = params(d);
    let data = generate_stage_data(&one_stage(n, d), &truth, &all_arms(d), 1, 0, &mut replicate_rng(9, 0)).unwrap();
    let fit = fit_lmm(&data, d, Estimation::Reml).unwrap();
    let se_e = SIGMA_E * (2.0 / (n * (d - 1) - 6) as f64).sqrt();
    let se_b = (2.0 / n as f64).sqrt() * (SIGMA_B + SIGMA_E / d as f64);
    assert!((fit.sigma_e_sq_hat - SIGMA_E).abs() < 4.0 * se_e, "{}", fit.sigma_e_sq_hat);
    assert!((fit.sigma_b_sq_hat - SIGMA_B).abs() < 4.0 * se_b, "{}", fit.sigma_b_sq_hat);
    let se_tau = (2.0 * SIGMA_E / n as f64).sqrt();
    for (t, true_t) in fit.tau_hat.iter().zip(&truth.tau) {
        assert!((t - true_t).abs() < 4.0 * se_tau);
    }
    assert!(!fit.boundary);
}

// Numeric t CDF by Simpson's rule on the density, inverted by bisection.
fn t_quantile_oracle(p: f64, df: f64) -> f64 {
    let log_c = libm::lgamma((df + 1.0) / 2.0) - libm::lgamma(df / 2.0) - 0.5 * (df * PI).ln();
    let dens = |x: f64| (log_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let cdf = |x: f64| {
        // P(T <= x) = 1/2 + integral_0^x for x > 0
        let m = 4000;
        let h = x / m as f64;
        let s: f64 = (0..=m)
            .map(|i| {
                let w = if i == 0 || i == m {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w * dens(i as f64 * h)
            })
            .sum();
        0.5 + s * h / 3.0
    };
    let (mut lo, mut hi) = (0.0, 100.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn quantile_substitution_matches_numeric_inversion() {
    assert!((quantile_substitute(1.96, 20.0).unwrap() - 2.086).abs() < 1e-3);
    for &(b, df) in &[(1.96, 20.0), (2.879, 30.0), (0.768, 30.0), (2.036, 66.0), (1.2, 3.0), (2.0, 1.0)] {
        let oracle = t_quantile_oracle(norm_cdf(b), df);
        let got = quantile_substitute(b, df).unwrap();
        assert!((got - oracle).abs() < 1e-6 * oracle.max(1.0), "b={b} df={df}: {got} vs {oracle}");
        assert!((quantile_substitute(-b, df).unwrap() + got).abs() < 1e-12);
    }
    assert!((quantile_substitute(2.2, 1e7).unwrap() - 2.2).abs() < 1e-6);
    assert_eq!(quantile_substitute(0.0, 5.0).unwrap(), 0.0);
    assert!(quantile_substitute(1.0, 0.5).is_err());
}

fn numeric_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    sv.iter().filter(|&&s| s > 1e-9 * top).count()
}

#[test]
fn degrees_of_freedom_match_projection_rank() {
    let d = 4;
    let n = 12;
    let des = one_stage(n, d);
    let truth = params(d);
    let histories: Vec<Vec<Vec<usize>>> = vec![
        vec![vec![0, 1, 2, 3]],
        vec![vec![0, 1, 2, 3], vec![0, 1, 2, 3]],
        vec![vec![0, 1, 2, 3], vec![0, 1, 3]],
        vec![vec![0, 1, 2, 3], vec![0, 2], vec![0, 2]],
    ];
    for history in histories {
        let mut data: Vec<PatientRecord> = Vec::new();
        for (l, remaining) in history.iter().enumerate() {
            let mut rng = replicate_rng(1, l as u64);
            data.extend(generate_stage_data(&des, &truth, remaining, l + 1, data.len(), &mut rng).unwrap());
        }
        let obs: usize = data.iter().map(|p| p.responses.len()).sum();
        let subjects = data.len();
        // [Z X] with one indicator column per subject.
        let mut m = DMatrix::zeros(obs, subjects + 2 * d - 1);
        let mut row = 0;
        for (s, rec) in data.iter().enumerate() {
            let x = dense_row_block(rec, d);
            for j in 0..x.nrows() {
                m[(row, s)] = 1.0;
                for c in 0..x.ncols() {
                    m[(row, subjects + c)] = x[(j, c)];
                }
                row += 1;
            }
        }
        let oracle = obs - numeric_rank(&m);
        let sizes: Vec<usize> = history.iter().map(Vec::len).collect();
        assert_eq!(anova_df(n, d, &sizes), oracle, "history {history:?}");
    }
    assert_eq!(anova_df(12, 4, &[4]), 30);
    assert_eq!(anova_df(12, 4, &[4, 4]), 66);
    assert_eq!(anova_df(1, 2, &[2]), 1);
}

#[test]
fn known_variance_estimates_follow_canonical_law() {
    let d = 4;
    let n = 12;
    let des = one_stage(n, d);
    let truth = TrueParameters::null(d, SIGMA_B, SIGMA_E);
    let vc = VarianceComponents::new(SIGMA_B, SIGMA_E).unwrap();
    let reps = 10_000;
    let mut stage1 = Vec::with_capacity(reps);
    let mut stage2 = Vec::with_capacity(reps);
    for i in 0..reps {
        let mut rng = replicate_rng(42, i as u64);
        let mut data = generate_stage_data(&des, &truth, &all_arms(d), 1, 0, &mut rng).unwrap();
        let z1 = fit_known(&data, d, &vc).unwrap().statistics();
        data.extend(generate_stage_data(&des, &truth, &all_arms(d), 2, n, &mut rng).unwrap());
        let fit = fit_known(&data, d, &vc).unwrap();
        stage1.push(z1);
        stage2.push((fit.tau_hat.clone(), fit.statistics()));
    }
    let m = reps as f64;
    // cov(tau_hat) after two stages: sigma_e^2 (I + J) / (2 n).
    let scale = SIGMA_E / (2.0 * n as f64);
    for a in 0..3 {
        for b in 0..3 {
            let expected = scale * if a == b { 2.0 } else { 1.0 };
            let cov = stage2.iter().map(|(t, _)| t[a] * t[b]).sum::<f64>() / m;
            let diag = 2.0 * scale;
            let se = ((diag * diag + expected * expected) / m).sqrt();
            assert!((cov - expected).abs() < 3.5 * se, "({a},{b}) {cov} vs {expected}");
        }
    }
    // Same treatment across the two analyses: correlation sqrt(1/2).
    for t in 0..3 {
        let cross = stage1.iter().zip(&stage2).map(|(z1, (_, z2))| z1[t] * z2[t]).sum::<f64>();
        let v1 = stage1.iter().map(|z| z[t] * z[t]).sum::<f64>();
        let v2 = stage2.iter().map(|(_, z)| z[t] * z[t]).sum::<f64>();
        let corr = cross / (v1 * v2).sqrt();
        let rho = 0.5f64.sqrt();
        let se = (1.0 - rho * rho) / m.sqrt();
        assert!((corr - rho).abs() < 3.5 * se, "treatment {t}: {corr}");
    }
}

#[test]
fn large_group_matches_analytic_error_rate() {
    let des = design(3, 2, 240, &[0.3, 2.1], &[2.6, 2.1]);
    let analytic = Evaluator::new(&des, MvnOptions::with_tol(1e-5), 3).unwrap().familywise_error(&[0.0, 0.0]).unwrap();
    let truth = TrueParameters::null(3, SIGMA_B, SIGMA_E);
    let reps = 4000;
    let report = simulate(&des, &truth, AnalysisProcedure::numbered(3).unwrap(), reps, 77).unwrap();
    assert_eq!(report.failures, 0);
    let se = (analytic * (1.0 - analytic) / reps as f64).sqrt();
    assert!((report.reject_any_rate - analytic).abs() < 3.0 * se, "{} vs {analytic}", report.reject_any_rate);
}

#[test]
fn simulation_is_reproducible() {
    let des = design(4, 2, 12, &[0.768, 2.036], &[2.879, 2.036]);
    let truth = TrueParameters::null(4, SIGMA_B, SIGMA_E);
    let proc4 = AnalysisProcedure::numbered(4).unwrap();
    let a = simulate(&des, &truth, proc4, 300, 123).unwrap();
    let b = simulate(&des, &truth, proc4, 300, 123).unwrap();
    assert_eq!(a, b);
    let total: u64 = a.path_counts.iter().sum();
    assert_eq!(total as usize, a.completed());
    assert!((a.stopping_stage.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn substitution_widens_positive_boundaries(b in 0.01..4.0f64, df in 1.0..500.0f64) {
        let adj = quantile_substitute(b, df).unwrap();
        prop_assert!(adj >= b);
        let more = quantile_substitute(b, df * 2.0).unwrap();
        prop_assert!(more <= adj + 1e-12);
    }

    #[test]
    fn df_is_positive(n in 1usize..50, d in 2usize..6, drops in prop::collection::vec(0usize..3, 0..4)) {
        let mut sizes = vec![d];
        for k in drops {
            let last = *sizes.last().unwrap();
            sizes.push(last.saturating_sub(k).max(2));
        }
        prop_assert!(anova_df(n, d, &sizes) >= 1);
    }
}
