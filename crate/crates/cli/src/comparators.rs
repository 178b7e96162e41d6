//! Baseline smoothing criteria for the simulation harness: generalized
//! cross validation and the exact Gaussian restricted likelihood, both
//! optimized over the log smoothing parameters by the same outer loop
//! as the neighbourhood criterion. Both assume independent data; their
//! behaviour under correlated noise is the contrast the harness
//! measures.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1};
use thiserror::Error;

use ncv_core::linalg::sym_eigen;
use ncv_core::{
    fit_inner, optimize_with, CholeskyFactor, FamilyKind, FitError, FittedModel, LinalgError,
    OptimizeOptions, OuterEval, OuterResult, Problem,
};

/// Eigenvalues of the total penalty below this fraction of the largest
/// count as its null space.
const PDET_TOL: f64 = 1e-10;
/// Central-difference step (in log smoothing parameters) for criteria
/// without analytic gradients.
const FD_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ComparatorError {
    #[error("criterion does not support family {0:?}")]
    UnsupportedFamily(String),
    #[error("restricted likelihood is degenerate: n = {n} <= penalty null dimension {m0}")]
    Degenerate { n: usize, m0: usize },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A comparator criterion minimum: final inner fit, criterion value,
/// and the outer trace.
#[derive(Debug)]
pub struct ComparatorOptimum {
    pub fit: FittedModel,
    pub value: f64,
    pub outer: OuterResult,
}

/// `n sum_i (y_i - mu_i)^2 / (n - tr A)^2` with the influence trace
/// taken as the effective degrees of freedom (for the Gaussian identity
/// family they coincide exactly).
pub fn gcv_value(problem: &Problem, fm: &FittedModel) -> Result<f64, ComparatorError> {
    if problem.family.k() != 1 {
        return Err(ComparatorError::UnsupportedFamily(problem.family.name().to_owned()));
    }
    let n = problem.n() as f64;
    let mut rss = 0.0;
    for i in 0..problem.n() {
        let mu = problem.family.mean(&[fm.eta[[i, 0]]]);
        rss += (problem.y[i] - mu).powi(2);
    }
    let denom = n - fm.edf;
    Ok(n * rss / (denom * denom))
}

/// Pseudo-determinant pieces of the total penalty `sum_j lambda_j S_j`:
/// log product of the nonzero eigenvalues, the rank, and the spectrum
/// for pseudo-inverse traces.
struct PenaltySpectrum {
    log_pdet: f64,
    rank: usize,
    eigs: Array1<f64>,
    vecs: Array2<f64>,
    tol: f64,
}

fn penalty_spectrum(s_lam: &Array2<f64>) -> PenaltySpectrum {
    let (eigs, vecs) = sym_eigen(s_lam.view());
    let max_eig = eigs.iter().fold(0.0f64, |m, &v| m.max(v));
    let tol = PDET_TOL * max_eig;
    let mut log_pdet = 0.0;
    let mut rank = 0;
    for &eig in &eigs {
        if eig > tol && eig > 0.0 {
            log_pdet += eig.ln();
            rank += 1;
        }
    }
    PenaltySpectrum { log_pdet, rank, eigs, vecs, tol }
}

fn total_penalty(problem: &Problem, lambda: &[f64]) -> Array2<f64> {
    let p = problem.p();
    let mut s_lam = Array2::<f64>::zeros((p, p));
    for (pen, &lam) in problem.penalties.iter().zip(lambda) {
        let q = pen.dim();
        for i in 0..q {
            for j in 0..q {
                s_lam[[pen.offset + i, pen.offset + j]] += lam * pen.core[[i, j]];
            }
        }
    }
    s_lam
}

/// Negative restricted log likelihood (times two, constants kept) of
/// the Gaussian model `y = X beta + e` with improper prior precision
/// `sum_j lambda_j S_j / sigma^2` and the noise variance profiled out:
///
/// ```text
///   (n - M0) (1 + log(2 pi Dp / (n - M0))) + log|X'X + S_lam| - log|S_lam|_+
/// ```
///
/// where `Dp` is the penalized residual sum of squares at the fit and
/// `M0` the penalty null dimension.
pub fn reml_gaussian(problem: &Problem, fm: &FittedModel) -> Result<f64, ComparatorError> {
    Ok(reml_eval(problem, fm)?.0)
}

fn reml_eval(problem: &Problem, fm: &FittedModel) -> Result<(f64, Array1<f64>), ComparatorError> {
    if problem.family.kind != FamilyKind::GaussianIdentity {
        return Err(ComparatorError::UnsupportedFamily(problem.family.name().to_owned()));
    }
    let (n, p) = (problem.n(), problem.p());
    // the squared-error loss Hessian is 2 X'X
    let xtx = &fm.h * 0.5;
    let s_lam = total_penalty(problem, &fm.lambda);
    let spectrum = penalty_spectrum(&s_lam);
    let m0 = p - spectrum.rank;
    if n <= m0 {
        return Err(ComparatorError::Degenerate { n, m0 });
    }
    let a = CholeskyFactor::new((&xtx + &s_lam).view())?;
    let nm = (n - m0) as f64;
    let dp = fm.penalized_loss;
    let sigma2 = dp / nm;
    let value = nm * (1.0 + (2.0 * PI * sigma2).ln()) + a.log_det() - spectrum.log_pdet;

    let mut grad = Array1::<f64>::zeros(problem.m());
    for (j, pen) in problem.penalties.iter().enumerate() {
        let lam = fm.lambda[j];
        let bsb = pen.quad_form(fm.beta.view());
        // tr(A^{-1} S_j) column by column of the embedded penalty
        let q = pen.dim();
        let mut tr_a = 0.0;
        let mut col = Array1::<f64>::zeros(p);
        for c in 0..q {
            col.fill(0.0);
            for i in 0..q {
                col[pen.offset + i] = pen.core[[i, c]];
            }
            tr_a += a.solve(col.view())[pen.offset + c];
        }
        // tr(S_lam^+ S_j) over the nonzero penalty spectrum
        let mut tr_pinv = 0.0;
        for (k, &eig) in spectrum.eigs.iter().enumerate() {
            if eig > spectrum.tol && eig > 0.0 {
                tr_pinv += pen.quad_form(spectrum.vecs.column(k)) / eig;
            }
        }
        grad[j] = lam * (bsb / sigma2 + tr_a - tr_pinv);
    }
    Ok((value, grad))
}

/// Minimizes GCV over the log smoothing parameters; gradients by
/// central differences (two inner fits per parameter, each a single
/// Cholesky for the Gaussian case the harness uses).
pub fn optimize_gcv(
    problem: &Problem,
    rho0: ArrayView1<f64>,
    opts: &OptimizeOptions,
) -> Result<ComparatorOptimum, ComparatorError> {
    gcv_value(problem, &fit_inner(problem, rho0, None, &opts.fit)?)?;
    optimize_comparator(problem, rho0, opts, |problem, fit, fit_opts| {
        let value = gcv_value(problem, fit)?;
        let m = problem.m();
        let mut grad = Array1::<f64>::zeros(m);
        let mut rho = fit.rho.clone();
        for j in 0..m {
            let base = rho[j];
            rho[j] = base + FD_STEP;
            let up = fit_inner(problem, rho.view(), Some(fit.beta.view()), fit_opts)?;
            rho[j] = base - FD_STEP;
            let down = fit_inner(problem, rho.view(), Some(fit.beta.view()), fit_opts)?;
            rho[j] = base;
            grad[j] = (gcv_value(problem, &up)? - gcv_value(problem, &down)?) / (2.0 * FD_STEP);
        }
        Ok((value, grad))
    })
}

/// Minimizes the Gaussian restricted likelihood (analytic gradient).
pub fn optimize_reml(
    problem: &Problem,
    rho0: ArrayView1<f64>,
    opts: &OptimizeOptions,
) -> Result<ComparatorOptimum, ComparatorError> {
    optimize_comparator(problem, rho0, opts, |problem, fit, _| reml_eval(problem, fit))
}

fn optimize_comparator(
    problem: &Problem,
    rho0: ArrayView1<f64>,
    opts: &OptimizeOptions,
    mut criterion: impl FnMut(
        &Problem,
        &FittedModel,
        &ncv_core::FitOptions,
    ) -> Result<(f64, Array1<f64>), ComparatorError>,
) -> Result<ComparatorOptimum, ComparatorError> {
    let mut warm: Option<Array1<f64>> = None;
    let mut last: Option<(Array1<f64>, FittedModel, f64)> = None;
    let outer = optimize_with(
        |rho: ArrayView1<f64>| -> Result<OuterEval, ComparatorError> {
            let fit = fit_inner(problem, rho, warm.as_ref().map(|b| b.view()), &opts.fit)?;
            warm = Some(fit.beta.clone());
            let (value, grad) = criterion(problem, &fit, &opts.fit)?;
            last = Some((rho.to_owned(), fit, value));
            Ok(OuterEval { value, grad, freeze_scores: None })
        },
        rho0,
        problem.p() as f64,
        opts,
    )?;
    // the cached evaluation may belong to a rejected line-search trial
    let (fit, value) = match last {
        Some((rho, fit, value)) if rho == outer.rho => (fit, value),
        other => {
            let warm = other.as_ref().map(|(_, f, _)| f.beta.view());
            let fit = fit_inner(problem, outer.rho.view(), warm, &opts.fit)?;
            let (value, _) = criterion(problem, &fit, &opts.fit)?;
            (fit, value)
        }
    };
    Ok(ComparatorOptimum { fit, value, outer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ncv_core::linalg::solve_dense;
    use ncv_core::{
        build_design, make_scheme, optimize_ncv, DataTable, FamilyInstance, ModelSpec, NcvOptions,
        PenaltyMatrix, SchemeKind, TermDef,
    };
    use ndarray::Array2;

    fn spline_problem(n: usize, k: usize, seed: u64, slope: f64, noise: f64) -> (DataTable, Problem) {
        use ncv_core::replicate_rng;
        use rand::Rng;
        let mut rng = replicate_rng(seed, 0);
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                0.3 + slope * x
                    + (4.0 * x).sin() * (1.0 - slope).max(0.0)
                    + noise * rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
            .collect();
        let mut t = DataTable::new();
        t.push_numeric("x", xs).unwrap();
        t.push_numeric("y", ys.clone()).unwrap();
        let terms = vec![vec![TermDef::Spline { var: "x".into(), k, m: 2 }]];
        let spec = ModelSpec::build(&terms, &t).unwrap();
        let x = build_design(&spec, &t).unwrap();
        let problem = Problem::new(
            x,
            Array1::from(ys),
            spec.pred_cols.clone(),
            spec.penalties().to_vec(),
            FamilyInstance::gaussian(),
        )
        .unwrap();
        (t, problem)
    }

    fn dense_influence_trace(problem: &Problem, lambda: &[f64]) -> (Array2<f64>, f64) {
        // A = X (X'X + S_lam)^{-1} X' assembled column by column
        let (n, p) = (problem.n(), problem.p());
        let xtx = problem.x.t().dot(&problem.x);
        let a_mat = &xtx + &total_penalty(problem, lambda);
        let mut inv = Array2::<f64>::zeros((p, p));
        for j in 0..p {
            let mut e = Array1::<f64>::zeros(p);
            e[j] = 1.0;
            let col = solve_dense(a_mat.view(), e.view()).unwrap();
            inv.column_mut(j).assign(&col);
        }
        let infl = problem.x.dot(&inv).dot(&problem.x.t());
        let tr = (0..n).map(|i| infl[[i, i]]).sum();
        (infl, tr)
    }

    #[test]
    fn gcv_matches_the_influence_matrix_formula_on_ten_points() {
        let (_, problem) = spline_problem(10, 5, 31, 0.4, 0.3);
        let rho = Array1::from(vec![0.3]);
        let fit = fit_inner(&problem, rho.view(), None, &Default::default()).unwrap();
        let (infl, tr_a) = dense_influence_trace(&problem, &fit.lambda);
        let yhat = infl.dot(&problem.y);
        let n = 10.0;
        let rss: f64 = (0..10).map(|i| (problem.y[i] - yhat[i]).powi(2)).sum();
        let hand = n * rss / (n - tr_a).powi(2);
        let got = gcv_value(&problem, &fit).unwrap();
        assert_abs_diff_eq!(fit.edf, tr_a, epsilon = 1e-8);
        assert_abs_diff_eq!(got, hand, epsilon = 1e-10 * hand.abs());
    }

    #[test]
    fn reml_matches_a_direct_determinant_evaluation_on_two_coefficients() {
        // intercept + slope with a ridge penalty on the slope only
        let n = 12;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| 1.0 + 2.0 * x + (7.3 * x).sin() * 0.1).collect();
        let mut x = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            x[[i, 0]] = 1.0;
            x[[i, 1]] = xs[i];
        }
        let pen = PenaltyMatrix {
            block: 0,
            offset: 1,
            core: ndarray::array![[1.0]],
            null_dim: 0,
            label: "ridge".into(),
        };
        let problem = Problem::new(
            x.clone(),
            Array1::from(ys.clone()),
            vec![vec![0, 1]],
            vec![pen],
            FamilyInstance::gaussian(),
        )
        .unwrap();
        let rho = Array1::from(vec![0.7]);
        let fit = fit_inner(&problem, rho.view(), None, &Default::default()).unwrap();
        let got = reml_gaussian(&problem, &fit).unwrap();

        // oracle: scalar determinant arithmetic from scratch
        let lam = 0.7f64.exp();
        let (sx, sxx): (f64, f64) = (xs.iter().sum(), xs.iter().map(|v| v * v).sum());
        let a = [[n as f64, sx], [sx, sxx + lam]];
        let det_a = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let (sy, sxy): (f64, f64) =
            (ys.iter().sum(), xs.iter().zip(&ys).map(|(x, y)| x * y).sum());
        let b0 = (sy * a[1][1] - sxy * a[0][1]) / det_a;
        let b1 = (a[0][0] * sxy - a[1][0] * sy) / det_a;
        let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - b0 - b1 * x).powi(2)).sum();
        let dp = rss + lam * b1 * b1;
        let m0 = 1.0;
        let nm = n as f64 - m0;
        let oracle = nm * (1.0 + (2.0 * PI * dp / nm).ln()) + det_a.ln() - lam.ln();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-8 * oracle.abs());
    }

    #[test]
    fn reml_gradient_matches_finite_differences() {
        let (_, problem) = spline_problem(80, 8, 47, 0.0, 0.2);
        for &r in &[-1.5f64, 0.0, 2.0] {
            let rho = Array1::from(vec![r]);
            let fit = fit_inner(&problem, rho.view(), None, &Default::default()).unwrap();
            let (_, grad) = reml_eval(&problem, &fit).unwrap();
            let h = 1e-5;
            let up = fit_inner(&problem, Array1::from(vec![r + h]).view(), None, &Default::default())
                .unwrap();
            let down =
                fit_inner(&problem, Array1::from(vec![r - h]).view(), None, &Default::default())
                    .unwrap();
            let fd = (reml_gaussian(&problem, &up).unwrap()
                - reml_gaussian(&problem, &down).unwrap())
                / (2.0 * h);
            assert_abs_diff_eq!(grad[0], fd, epsilon = 1e-4 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn linear_truth_drives_gcv_and_ncv_to_the_same_degrees_of_freedom() {
        // straight-line signal: both criteria should smooth the spline
        // down to its null space (edf near 2)
        let (table, problem) = spline_problem(150, 10, 53, 1.0, 0.05);
        let rho0 = Array1::from(vec![0.0]);
        let opts = OptimizeOptions::default();
        let gcv = optimize_gcv(&problem, rho0.view(), &opts).unwrap();
        let scheme = make_scheme(&SchemeKind::Loo, &table).unwrap();
        let ncv =
            optimize_ncv(&problem, &scheme, rho0.view(), &NcvOptions::default(), &opts).unwrap();
        assert!(
            (gcv.fit.edf - ncv.fit.edf).abs() < 0.5,
            "gcv edf {} vs ncv edf {}",
            gcv.fit.edf,
            ncv.fit.edf
        );
        assert!(gcv.fit.edf < 3.0, "gcv edf {}", gcv.fit.edf);
    }

    #[test]
    fn non_gaussian_families_are_refused_where_unsupported() {
        let (_, gaussian) = spline_problem(30, 6, 9, 0.2, 0.1);
        let ys: Vec<f64> = gaussian.y.iter().map(|y| y.abs() + 0.1).collect();
        let poisson = Problem::new(
            gaussian.x.clone(),
            Array1::from(ys),
            gaussian.pred_cols.clone(),
            gaussian.penalties.clone(),
            FamilyInstance::poisson_log(),
        )
        .unwrap();
        let fit = fit_inner(&poisson, Array1::from(vec![0.0]).view(), None, &Default::default())
            .unwrap();
        // REML refuses anything but the Gaussian identity family; GCV
        // accepts any single-predictor family
        assert!(matches!(
            reml_gaussian(&poisson, &fit),
            Err(ComparatorError::UnsupportedFamily(_))
        ));
        assert!(gcv_value(&poisson, &fit).is_ok());
    }
}
