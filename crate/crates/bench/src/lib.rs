//! Shared fixtures and timing helpers for the criterion benches and the
//! cost-scaling checks in the test suite.

use ncv_core::{
    build_design, fit_inner, make_scheme, ncv_criterion, replicate_rng, sim_curve, CorrKind,
    DataTable, FamilyInstance, FitOptions, FittedModel, ModelSpec, NcvOptions,
    NeighbourhoodScheme, Problem, RespKind, SchemeKind, TermDef,
};
use ndarray::Array1;
use std::time::Instant;

/// Gaussian spline regression problem on `n` points with a `k`-column
/// basis; deterministic in `seed`.
pub fn spline_problem(n: usize, k: usize, seed: u64) -> (Problem, DataTable) {
    let mut rng = replicate_rng(seed, 0);
    let sim = sim_curve(&mut rng, n, CorrKind::White, RespKind::Gaussian);
    let spec = ModelSpec::build(&[vec![TermDef::Spline { var: "x".into(), k, m: 2 }]], &sim.table)
        .unwrap();
    let x = build_design(&spec, &sim.table).unwrap();
    let y = Array1::from(sim.table.numeric("y").unwrap().to_vec());
    let problem = Problem::new(
        x,
        y,
        spec.pred_cols.clone(),
        spec.penalties().to_vec(),
        FamilyInstance::gaussian(),
    )
    .unwrap();
    (problem, sim.table)
}

/// Fitted model and scheme for the problem, ready for criterion
/// evaluation timing.
pub fn eval_fixture(
    problem: &Problem,
    table: &DataTable,
    scheme: &SchemeKind,
) -> (FittedModel, NeighbourhoodScheme) {
    let fit = fit_inner(
        problem,
        Array1::zeros(problem.m()).view(),
        None,
        &FitOptions::default(),
    )
    .unwrap();
    let scheme = make_scheme(scheme, table).unwrap();
    (fit, scheme)
}

/// Smallest wall time over `reps` runs of `f`; the minimum is the least
/// noisy location statistic for a deterministic workload.
pub fn min_seconds<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let t = Instant::now();
        f();
        best = best.min(t.elapsed().as_secs_f64());
    }
    best
}

/// Time one cross-validation criterion evaluation (with gradient) on a
/// prepared fit, minimum over `reps` runs.
pub fn ncv_eval_seconds(
    problem: &Problem,
    fit: &FittedModel,
    scheme: &NeighbourhoodScheme,
    reps: usize,
) -> f64 {
    let opts = NcvOptions::default();
    min_seconds(reps, || {
        let r = ncv_criterion(problem, fit, scheme, &opts).unwrap();
        std::hint::black_box(r.value);
    })
}

/// Least-squares slope of log(time) against log(size): the empirical
/// power-law exponent of a cost curve.
pub fn power_law_exponent(sizes: &[f64], secs: &[f64]) -> f64 {
    assert_eq!(sizes.len(), secs.len());
    assert!(sizes.len() >= 2);
    let n = sizes.len() as f64;
    let xs: Vec<f64> = sizes.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = secs.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
