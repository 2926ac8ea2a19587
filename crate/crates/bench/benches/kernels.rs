use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use gsxover_core::covariance::joint_distribution;
use gsxover_core::evaluator::Evaluator;
use gsxover_core::mvn::mvn_rectangle;
use gsxover_core::simulator::{fit_lmm, generate_stage_data, replicate_rng};
use gsxover_core::{Estimation, MvnOptions, RectangleProblem, SequenceFamily, TrialDesign, TrueParameters};

fn reference() -> TrialDesign {
    TrialDesign {
        treatments: 4,
        stages: 3,
        group_size: 36,
        futility: vec![0.4104, 1.4033, 2.1063],
        efficacy: vec![2.7720, 2.3310, 2.1063],
        sigma_e_sq: 6.51,
        sigma_b_sq: Some(10.12),
        family: SequenceFamily::Williams,
        delta: 1.11,
        alpha: 0.05,
        beta: 0.2,
    }
}

fn rectangle(c: &mut Criterion) {
    let joint = joint_distribution(4, 3, 36, 6.51);
    let inf = f64::INFINITY;
    // Continue on all three treatments at stages 1-2, then test at stage 3.
    let lower = [0.41, 0.41, 0.41, 1.40, 1.40, 1.40, -inf, -inf, -inf];
    let upper = [2.77, 2.77, 2.77, 2.33, 2.33, 2.33, 2.11, 2.11, 2.11];
    let problem =
        RectangleProblem::new(vec![0.0; 9], joint.correlation.clone(), lower.to_vec(), upper.to_vec()).unwrap();
    let mut g = c.benchmark_group("mvn_rectangle");
    g.sample_size(10);
    for tol in [1e-4, 1e-5] {
        g.bench_function(format!("dim9_tol{tol:e}"), |b| {
            b.iter(|| mvn_rectangle(black_box(&problem), tol, 1).unwrap())
        });
    }
    g.finish();
}

fn paths(c: &mut Criterion) {
    let ev = Evaluator::new(&reference(), MvnOptions::with_tol(1e-4), 1).unwrap();
    let mut g = c.benchmark_group("evaluator");
    g.sample_size(10);
    g.bench_function("all_paths_tol1e-4", |b| b.iter(|| ev.path_probabilities(black_box(&[0.0; 3])).unwrap()));
    g.bench_function("fwer_tol1e-4", |b| b.iter(|| ev.familywise_error(black_box(&[0.0; 3])).unwrap()));
    g.finish();
}

fn fitting(c: &mut Criterion) {
    let design = TrialDesign { group_size: 12, stages: 2, ..reference() };
    let truth = TrueParameters::null(4, 10.12, 6.51);
    let mut rng = replicate_rng(3, 0);
    let mut data = generate_stage_data(&design, &truth, &[0, 1, 2, 3], 1, 0, &mut rng).unwrap();
    data.extend(generate_stage_data(&design, &truth, &[0, 1, 3], 2, data.len(), &mut rng).unwrap());
    let mut g = c.benchmark_group("fit_lmm");
    for est in [Estimation::Ml, Estimation::Reml] {
        g.bench_function(format!("{est:?}_24_patients"), |b| b.iter(|| fit_lmm(black_box(&data), 4, est).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, rectangle, paths, fitting);
criterion_main!(benches);
