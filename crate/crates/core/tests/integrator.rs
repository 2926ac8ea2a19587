use std::f64::consts::{FRAC_1_SQRT_2, PI};

use gsxover_core::mvn::{mvn_rectangle, norm_cdf, norm_quantile};
use gsxover_core::RectangleProblem;
use nalgebra::DMatrix;
use proptest::prelude::*;

const INF: f64 = f64::INFINITY;

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_m.
fn gauss_legendre(m: usize) -> Vec<(f64, f64)> {
    (0..m)
        .map(|i| {
            let mut x = (PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=m {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                    p0 = p1;
                    p1 = p2;
                }
                dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
                let step = p1 / dp;
                x -= step;
                if step.abs() < 1e-15 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// Composite rule on [a, b] with infinite ends truncated at +-9.
fn composite(a: f64, b: f64, panels: usize, rule: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let (a, b) = (a.max(-9.0), b.min(9.0));
    if a >= b {
        return Vec::new();
    }
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * rule.len());
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for &(x, w) in rule {
            out.push((mid + 0.5 * h * x, 0.5 * h * w));
        }
    }
    out
}

/// Tensor-product quadrature of the zero-mean density over the rectangle.
fn quadrature(corr: &DMatrix<f64>, lower: &[f64], upper: &[f64]) -> f64 {
    let k = lower.len();
    let rule = gauss_legendre(20);
    let grids: Vec<Vec<(f64, f64)>> = (0..k).map(|i| composite(lower[i], upper[i], 12, &rule)).collect();
    let inv = corr.clone().try_inverse().unwrap();
    let norm = ((2.0 * PI).powi(k as i32) * corr.determinant()).sqrt();
    let mut total = 0.0;
    let mut idx = vec![0usize; k];
    if grids.iter().any(|g| g.is_empty()) {
        return 0.0;
    }
    loop {
        let mut w = 1.0;
        let x: Vec<f64> = (0..k)
            .map(|i| {
                let (xi, wi) = grids[i][idx[i]];
                w *= wi;
                xi
            })
            .collect();
        let mut q = 0.0;
        for i in 0..k {
            for j in 0..k {
                q += x[i] * inv[(i, j)] * x[j];
            }
        }
        total += w * (-0.5 * q).exp() / norm;
        let mut pos = 0;
        loop {
            if pos == k {
                return total;
            }
            idx[pos] += 1;
            if idx[pos] < grids[pos].len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

fn corr3(r12: f64, r13: f64, r23: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[1.0, r12, r13, r12, 1.0, r23, r13, r23, 1.0])
}

fn prob(corr: &DMatrix<f64>, mean: &[f64], lower: &[f64], upper: &[f64], tol: f64) -> f64 {
    let problem = RectangleProblem::new(mean.to_vec(), corr.clone(), lower.to_vec(), upper.to_vec()).unwrap();
    mvn_rectangle(&problem, tol, 7).unwrap().value
}

#[test]
fn normal_cdf_and_quantile_round_trip() {
    for &p in &[1e-12, 1e-6, 0.001, 0.025, 0.3, 0.5, 0.8, 0.975, 1.0 - 1e-9] {
        let x = norm_quantile(p);
        assert!((norm_cdf(x) - p).abs() < 1e-14 * p.max(1e-3) / 1e-3, "p={p}");
    }
    assert!((norm_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
}

#[test]
fn bivariate_orthants() {
    for &rho in &[-0.9, -0.5, 0.0, 0.3, 0.5, FRAC_1_SQRT_2, 0.95] {
        let corr = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let p = prob(&corr, &[0.0, 0.0], &[0.0, 0.0], &[INF, INF], 1e-7);
        let exact = 0.25 + rho.asin() / (2.0 * PI);
        assert!((p - exact).abs() < 1e-6, "rho={rho} p={p} exact={exact}");
    }
}

#[test]
fn trivariate_orthants() {
    for &(a, b, c) in &[(0.5, 0.5, 0.5), (0.2, -0.3, 0.4), (0.7, 0.35, 0.5), (-0.4, -0.4, 0.2)] {
        let corr = corr3(a, b, c);
        let p = prob(&corr, &[0.0; 3], &[0.0; 3], &[INF; 3], 1e-7);
        let exact = 0.125 + (f64::asin(a) + f64::asin(b) + f64::asin(c)) / (4.0 * PI);
        assert!((p - exact).abs() < 1e-6, "p={p} exact={exact}");
    }
}

#[test]
fn agrees_with_quadrature() {
    let cases: Vec<(DMatrix<f64>, Vec<f64>, Vec<f64>)> = vec![
        (DMatrix::from_row_slice(1, 1, &[1.0]), vec![-0.3], vec![1.7]),
        (DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]), vec![-1.0, -INF], vec![0.5, 1.2]),
        (DMatrix::from_row_slice(2, 2, &[1.0, -0.4, -0.4, 1.0]), vec![0.2, 0.4], vec![INF, 2.0]),
        (corr3(0.5, 0.35, 0.7), vec![0.4, 1.4, -INF], vec![2.8, 2.3, 2.1]),
        (corr3(-0.2, 0.4, 0.1), vec![-1.5, -0.5, 0.0], vec![1.0, INF, 1.5]),
    ];
    for (corr, lower, upper) in cases {
        let k = lower.len();
        let q = quadrature(&corr, &lower, &upper);
        let p = prob(&corr, &vec![0.0; k], &lower, &upper, 1e-7);
        assert!((p - q).abs() < 1e-6, "k={k} p={p} quadrature={q}");
    }
}

#[test]
fn shifted_mean_matches_shifted_limits() {
    let corr = corr3(0.5, 0.5, 0.5);
    let mean = [0.4, -0.2, 1.0];
    let lower = [0.0, -1.0, 0.5];
    let upper = [2.0, 1.0, INF];
    let shifted_lower: Vec<f64> = lower.iter().zip(&mean).map(|(a, m)| a - m).collect();
    let shifted_upper: Vec<f64> = upper.iter().zip(&mean).map(|(b, m)| b - m).collect();
    let a = prob(&corr, &mean, &lower, &upper, 1e-7);
    let q = quadrature(&corr, &shifted_lower, &shifted_upper);
    assert!((a - q).abs() < 1e-6);
}

#[test]
fn bit_identical_for_fixed_seed() {
    let corr = DMatrix::from_fn(6, 6, |i, j| if i == j { 1.0 } else { 0.5 });
    let problem = RectangleProblem::new(vec![0.1; 6], corr, vec![-1.0; 6], vec![1.5; 6]).unwrap();
    let a = mvn_rectangle(&problem, 1e-5, 99).unwrap();
    let b = mvn_rectangle(&problem, 1e-5, 99).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.error_estimate.to_bits(), b.error_estimate.to_bits());
}

fn random_correlation(k: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |i, j| entries[i * k + j]);
    let s = &a * a.transpose() + DMatrix::identity(k, k) * 0.2;
    DMatrix::from_fn(k, k, |i, j| s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt())
}

fn limits() -> impl Strategy<Value = (f64, f64)> {
    (-3.0..3.0f64, 0.0..4.0f64, any::<bool>(), any::<bool>())
        .prop_map(|(a, w, lo_inf, hi_inf)| (if lo_inf { -INF } else { a }, if hi_inf { INF } else { a + w }))
}

const TOL: f64 = 1e-5;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn probability_in_unit_interval(
        k in 1usize..6,
        entries in prop::collection::vec(-1.0..1.0f64, 25),
        lims in prop::collection::vec(limits(), 5),
        mean in prop::collection::vec(-1.0..1.0f64, 5),
    ) {
        let corr = random_correlation(k, &entries);
        let (lower, upper): (Vec<f64>, Vec<f64>) = lims[..k].iter().copied().unzip();
        let problem = RectangleProblem::new(mean[..k].to_vec(), corr, lower, upper).unwrap();
        let r = mvn_rectangle(&problem, TOL, 3).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.value));
        prop_assert!(r.error_estimate >= 0.0);
    }

    #[test]
    fn enlarging_never_decreases(
        k in 1usize..6,
        entries in prop::collection::vec(-1.0..1.0f64, 25),
        lims in prop::collection::vec(limits(), 5),
        grow in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 5),
    ) {
        let corr = random_correlation(k, &entries);
        let (lower, upper): (Vec<f64>, Vec<f64>) = lims[..k].iter().copied().unzip();
        let big_lower: Vec<f64> = lower.iter().zip(&grow).map(|(a, g)| a - g.0).collect();
        let big_upper: Vec<f64> = upper.iter().zip(&grow).map(|(b, g)| b + g.1).collect();
        let small = prob(&corr, &vec![0.0; k], &lower, &upper, TOL);
        let big = prob(&corr, &vec![0.0; k], &big_lower, &big_upper, TOL);
        prop_assert!(big >= small - 2.0 * TOL, "small={} big={}", small, big);
    }

    #[test]
    fn partition_of_one_axis_sums(
        k in 2usize..6,
        entries in prop::collection::vec(-1.0..1.0f64, 25),
        lims in prop::collection::vec(limits(), 5),
        cut in -2.0..2.0f64,
    ) {
        let corr = random_correlation(k, &entries);
        let (mut lower, mut upper): (Vec<f64>, Vec<f64>) = lims[..k].iter().copied().unzip();
        lower[0] = -INF;
        upper[0] = INF;
        let whole = prob(&corr, &vec![0.0; k], &lower, &upper, TOL);
        upper[0] = cut;
        let below = prob(&corr, &vec![0.0; k], &lower, &upper, TOL);
        lower[0] = cut;
        upper[0] = INF;
        let above = prob(&corr, &vec![0.0; k], &lower, &upper, TOL);
        prop_assert!((below + above - whole).abs() < 3.0 * TOL, "{} + {} vs {}", below, above, whole);
    }
}
