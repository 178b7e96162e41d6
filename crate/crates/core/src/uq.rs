//! Coefficient covariance estimation.
//!
//! Three regimes built from the per-fold leave-out steps: a jackknife
//! estimate, an autocorrelation-robust double sum over neighbourhoods
//! (optionally with cross-validated residual rescaling), and the
//! large-sample Bayesian covariance. A learning-rate estimate splices
//! the Bayesian smoothing-bias term onto the robust estimate. Band
//! propagation to linear functionals lives here too.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

use crate::fit::{FittedModel, Problem};
use crate::linalg::sym_eigen;
use crate::ncv::FoldStep;
use crate::scheme::NeighbourhoodScheme;

/// 97.5% standard normal quantile: nominal 95% bands.
pub const Z_975: f64 = 1.959963984540054;
/// Full-fit residuals below this fraction of the response scale skip
/// the cross-validated rescale.
const RESIDUAL_GUARD: f64 = 1e-12;
/// Eigenvalues below minus this fraction of the largest one mark the
/// estimate as meaningfully indefinite before clipping.
const PSD_WARN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovKind {
    Jackknife,
    AutocorrRobust,
    BayesLargeSample,
    AutocorrPlusBayesBias,
}

impl CovKind {
    pub fn label(&self) -> &'static str {
        match self {
            CovKind::Jackknife => "jackknife",
            CovKind::AutocorrRobust => "autocorr_robust",
            CovKind::BayesLargeSample => "bayes_large_sample",
            CovKind::AutocorrPlusBayesBias => "autocorr_plus_bayes_bias",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    /// Symmetric PSD (after clipping) coefficient covariance.
    pub v_mat: Array2<f64>,
    pub kind: CovKind,
    /// Learning-rate estimate; present for bias-corrected kinds.
    pub nu_hat: Option<f64>,
    /// Whether the n/(n-tau) inflation was applied.
    pub scaled_by_edf: bool,
    /// Negative eigenvalues beyond rounding noise were clipped.
    pub psd_clipped: bool,
    /// Points whose full-fit residual was too small to rescale.
    pub rescale_skipped: usize,
}

#[derive(Debug, Error)]
pub enum UqError {
    #[error("scheme unsuitable for this estimator: {0}")]
    SchemeMismatch(String),
    #[error("expected a {expected} covariance, got {got}")]
    WrongKind { expected: &'static str, got: &'static str },
    #[error("nonpositive learning-rate estimate {0}")]
    NegativeNu(f64),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

/// Requires one fold per datum predicting exactly itself.
fn require_pointwise(scheme: &NeighbourhoodScheme) -> Result<(), UqError> {
    let n = scheme.fold_of.len();
    if scheme.folds() != n || scheme.delta.iter().enumerate().any(|(k, d)| d.as_slice() != [k]) {
        return Err(UqError::SchemeMismatch(format!(
            "need delta(k) = {{k}} for every datum, got scheme `{}`",
            scheme.label
        )));
    }
    Ok(())
}

/// Symmetrizes, clips negative eigenvalues to zero, and reports whether
/// anything beyond rounding noise was clipped.
fn psd_project(v: &Array2<f64>) -> (Array2<f64>, bool) {
    let p = v.nrows();
    let mut sym = Array2::<f64>::zeros((p, p));
    for a in 0..p {
        for b in 0..p {
            sym[[a, b]] = 0.5 * (v[[a, b]] + v[[b, a]]);
        }
    }
    let (vals, vecs) = sym_eigen(sym.view());
    let max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if vals.iter().all(|&v| v >= 0.0) {
        return (sym, false);
    }
    let clipped_badly = vals.iter().any(|&v| v < -PSD_WARN * max);
    let mut out = Array2::<f64>::zeros((p, p));
    for (j, &val) in vals.iter().enumerate() {
        if val > 0.0 {
            let col = vecs.column(j);
            for a in 0..p {
                for b in 0..p {
                    out[[a, b]] += val * col[a] * col[b];
                }
            }
        }
    }
    (out, clipped_badly)
}

/// Jackknife covariance from the fold steps: rows
/// `delta^{-alpha(i)} sqrt(n - |alpha(i)|) / sqrt(n |alpha(i)|)`,
/// stacked and crossed.
pub fn jackknife_cov(
    steps: &[FoldStep],
    scheme: &NeighbourhoodScheme,
) -> Result<CovarianceEstimate, UqError> {
    require_pointwise(scheme)?;
    let n = scheme.fold_of.len();
    let p = steps.first().map_or(0, |s| s.delta_beta.len());
    let mut d = Array2::<f64>::zeros((n, p));
    for step in steps {
        let a = scheme.alpha[step.fold].len() as f64;
        let w = ((n as f64 - a) / (n as f64 * a)).sqrt();
        for (j, v) in step.delta_beta.iter().enumerate() {
            d[[step.fold, j]] = w * v;
        }
    }
    let v = d.t().dot(&d);
    Ok(CovarianceEstimate {
        v_mat: v,
        kind: CovKind::Jackknife,
        nu_hat: None,
        scaled_by_edf: false,
        psd_clipped: false,
        rescale_skipped: 0,
    })
}

#[derive(Debug, Clone)]
pub struct AutocorrOptions {
    /// Rescale each step by the cross-validated over full-fit residual
    /// ratio before the double sum.
    pub use_cv_residuals: bool,
    /// Inflate by n/(n - tau).
    pub scaled_by_edf: bool,
}

impl Default for AutocorrOptions {
    fn default() -> Self {
        AutocorrOptions { use_cv_residuals: true, scaled_by_edf: true }
    }
}

/// Autocorrelation-robust covariance
/// `V = sum_i step_i (sum_{j in alpha(i)} step_j)'`, symmetrized and
/// projected to PSD. Needs a symmetric pointwise scheme so the double
/// sum is an expectation over mutually correlated pairs.
pub fn autocorr_cov(
    problem: &Problem,
    fm: &FittedModel,
    steps: &[FoldStep],
    scheme: &NeighbourhoodScheme,
    opts: &AutocorrOptions,
) -> Result<CovarianceEstimate, UqError> {
    require_pointwise(scheme)?;
    if !scheme.symmetric {
        return Err(UqError::SchemeMismatch(format!(
            "scheme `{}` is not symmetric",
            scheme.label
        )));
    }
    let n = scheme.fold_of.len();
    let p = steps.first().map_or(0, |s| s.delta_beta.len());
    let mut rescale_skipped = 0usize;

    let mut rows = Array2::<f64>::zeros((n, p));
    for step in steps {
        let i = step.fold;
        let mut ratio = 1.0;
        if opts.use_cv_residuals {
            let y = problem.y[i];
            let eta_hat: Vec<f64> = fm.eta.row(i).iter().take(problem.family.k()).copied().collect();
            let (_, eta_drop) = step.predicted[0];
            let e_hat = problem.family.generalized_residual(i, y, &eta_hat);
            let e_cv =
                problem.family.generalized_residual(i, y, &eta_drop[..problem.family.k()]);
            let r = e_cv / e_hat;
            if e_hat.abs() < RESIDUAL_GUARD * problem.y_scale() || !r.is_finite() {
                rescale_skipped += 1;
            } else {
                ratio = r;
            }
        }
        for (j, v) in step.delta_beta.iter().enumerate() {
            rows[[i, j]] = ratio * v;
        }
    }

    // neighbour sums, then one cross product
    let mut nbr = Array2::<f64>::zeros((n, p));
    for i in 0..n {
        for &j in &scheme.alpha[i] {
            for c in 0..p {
                nbr[[i, c]] += rows[[j, c]];
            }
        }
    }
    let mut v = rows.t().dot(&nbr);
    if opts.scaled_by_edf {
        let denom = n as f64 - fm.edf;
        if denom >= 1.0 {
            v *= n as f64 / denom;
        }
    }
    let (v, clipped) = psd_project(&v);
    Ok(CovarianceEstimate {
        v_mat: v,
        kind: CovKind::AutocorrRobust,
        nu_hat: None,
        scaled_by_edf: opts.scaled_by_edf,
        psd_clipped: clipped,
        rescale_skipped,
    })
}

/// Loss-to-negative-log-likelihood scale: the Gaussian squared-error
/// loss is 2 phi times the NLL, so its covariance formulas carry a
/// factor 2 phi-hat; the other families' losses are NLLs already.
fn nll_scale(problem: &Problem, fm: &FittedModel) -> f64 {
    use crate::loss::FamilyKind;
    match problem.family.kind {
        FamilyKind::GaussianIdentity => {
            let rss: f64 = (0..problem.n())
                .map(|i| (problem.y[i] - fm.eta[[i, 0]]).powi(2))
                .sum();
            let denom = (problem.n() as f64 - fm.edf).max(1.0);
            2.0 * rss / denom
        }
        _ => 1.0,
    }
}

fn h_lam_inv(fm: &FittedModel) -> Array2<f64> {
    let p = fm.beta.len();
    let mut inv = Array2::<f64>::zeros((p, p));
    for j in 0..p {
        let mut e = Array1::<f64>::zeros(p);
        e[j] = 1.0;
        let col = fm.r0.solve(e.view());
        inv.column_mut(j).assign(&col);
    }
    inv
}

/// Large-sample Bayesian covariance `s H_lam^{-1}`.
pub fn bayes_cov(problem: &Problem, fm: &FittedModel) -> CovarianceEstimate {
    let s = nll_scale(problem, fm);
    let (v, clipped) = psd_project(&(h_lam_inv(fm) * s));
    CovarianceEstimate {
        v_mat: v,
        kind: CovKind::BayesLargeSample,
        nu_hat: None,
        scaled_by_edf: false,
        psd_clipped: clipped,
        rescale_skipped: 0,
    }
}

/// Frequentist sandwich `s H_lam^{-1} H H_lam^{-1}` (a building block,
/// not a reported regime).
pub fn frequentist_matrix(problem: &Problem, fm: &FittedModel) -> Array2<f64> {
    let s = nll_scale(problem, fm);
    let inv = h_lam_inv(fm);
    inv.dot(&fm.h).dot(&inv) * s
}

/// Adds the Bayesian smoothing-bias term to a robust covariance: the
/// learning rate is estimated from the trace ratio of the frequentist
/// sandwich to the robust estimate, and `(V_b - V_f) / nu` is added.
pub fn bayes_bias_correct(
    problem: &Problem,
    fm: &FittedModel,
    vhat: &CovarianceEstimate,
) -> Result<CovarianceEstimate, UqError> {
    if vhat.kind != CovKind::AutocorrRobust {
        return Err(UqError::WrongKind {
            expected: CovKind::AutocorrRobust.label(),
            got: vhat.kind.label(),
        });
    }
    let s = nll_scale(problem, fm);
    let inv = h_lam_inv(fm);
    let v_b = &inv * s;
    let v_f = inv.dot(&fm.h).dot(&inv) * s;
    let tr_f = v_f.diag().sum();
    let tr_hat = vhat.v_mat.diag().sum();
    let nu = tr_f / tr_hat;
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(UqError::NegativeNu(nu));
    }
    let corrected = &vhat.v_mat + &((v_b - v_f) / nu);
    let (v, clipped) = psd_project(&corrected);
    Ok(CovarianceEstimate {
        v_mat: v,
        kind: CovKind::AutocorrPlusBayesBias,
        nu_hat: Some(nu),
        scaled_by_edf: vhat.scaled_by_edf,
        psd_clipped: clipped || vhat.psd_clipped,
        rescale_skipped: vhat.rescale_skipped,
    })
}

/// Pointwise mean and `mean +- z se` band for the linear functionals in
/// the rows of `x_pred`.
#[derive(Debug, Clone)]
pub struct BandTable {
    pub fit: Array1<f64>,
    pub se: Array1<f64>,
    pub lo: Array1<f64>,
    pub hi: Array1<f64>,
}

pub fn pointwise_bands(
    beta: ArrayView1<f64>,
    cov: &CovarianceEstimate,
    x_pred: ArrayView2<f64>,
    z: f64,
) -> BandTable {
    let n = x_pred.nrows();
    let fit = x_pred.dot(&beta);
    let mut se = Array1::<f64>::zeros(n);
    for (i, row) in x_pred.rows().into_iter().enumerate() {
        let q = row.dot(&cov.v_mat.dot(&row));
        se[i] = q.max(0.0).sqrt();
    }
    let lo = &fit - &(&se * z);
    let hi = &fit + &(&se * z);
    BandTable { fit, se, lo, hi }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataTable;
    use crate::fit::{fit_inner, FitOptions};
    use crate::loss::FamilyInstance;
    use crate::model::{build_design, ModelSpec, TermDef};
    use crate::ncv::{ncv_criterion, NcvOptions};
    use crate::scheme::{make_scheme, Rule, SchemeKind};
    use crate::synth::{replicate_rng, sim_curve, CorrKind, RespKind};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    /// Unpenalized straight-line Gaussian problem.
    fn line_problem(xs: &[f64], ys: &[f64]) -> Problem {
        let n = xs.len();
        let mut x = Array2::<f64>::ones((n, 2));
        for i in 0..n {
            x[[i, 1]] = xs[i];
        }
        Problem::new(
            x,
            Array1::from(ys.to_vec()),
            vec![vec![0, 1]],
            Vec::new(),
            FamilyInstance::gaussian(),
        )
        .unwrap()
    }

    fn loo_steps(problem: &Problem, rho: &[f64]) -> (FittedModel, Vec<FoldStep>, NeighbourhoodScheme) {
        let mut t = DataTable::new();
        t.push_numeric("i", (0..problem.n()).map(|i| i as f64).collect()).unwrap();
        let scheme = make_scheme(&SchemeKind::Loo, &t).unwrap();
        let fit = fit_inner(
            problem,
            Array1::from(rho.to_vec()).view(),
            None,
            &FitOptions::default(),
        )
        .unwrap();
        let res = ncv_criterion(
            problem,
            &fit,
            &scheme,
            &NcvOptions { want_grad: false, ..NcvOptions::default() },
        )
        .unwrap();
        (fit, res.fold_steps, scheme)
    }

    #[test]
    fn jackknife_matches_explicit_leave_one_out_refits() {
        let mut rng = replicate_rng(29, 0);
        let n = 25;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> =
            xs.iter().map(|x| 1.0 + 2.0 * x + rng.random_range(-1.0..1.0)).collect();
        let problem = line_problem(&xs, &ys);
        let (_, steps, scheme) = loo_steps(&problem, &[]);
        let got = jackknife_cov(&steps, &scheme).unwrap();

        // dense refits: drop each row and re-solve the normal equations
        let x = &problem.x;
        let xtx = x.t().dot(x);
        let xty = x.t().dot(&problem.y);
        let beta = crate::linalg::solve_dense(xtx.view(), xty.view()).unwrap();
        let nf = n as f64;
        let mut want = Array2::<f64>::zeros((2, 2));
        for i in 0..n {
            let xi = x.row(i).to_owned();
            let mut xtx_i = xtx.clone();
            for a in 0..2 {
                for b in 0..2 {
                    xtx_i[[a, b]] -= xi[a] * xi[b];
                }
            }
            let rhs = &xty - &(&xi * problem.y[i]);
            let beta_i = crate::linalg::solve_dense(xtx_i.view(), rhs.view()).unwrap();
            let d = (&beta_i - &beta) * ((nf - 1.0) / nf).sqrt();
            for a in 0..2 {
                for b in 0..2 {
                    want[[a, b]] += d[a] * d[b];
                }
            }
        }
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for a in 0..2 {
            for b in 0..2 {
                assert!((got.v_mat[[a, b]] - want[[a, b]]).abs() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn exact_data_give_zero_jackknife() {
        let xs: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 + 3.0 * x).collect();
        let problem = line_problem(&xs, &ys);
        let (_, steps, scheme) = loo_steps(&problem, &[]);
        let v = jackknife_cov(&steps, &scheme).unwrap().v_mat;
        assert!(v.iter().all(|x| x.abs() < 1e-12), "nonzero jackknife on exact fit");
    }

    #[test]
    fn duplicating_data_halves_the_jackknife_variance() {
        let mut rng = replicate_rng(31, 0);
        let n = 40;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> =
            xs.iter().map(|x| 0.5 - x + rng.random_range(-1.0..1.0)).collect();
        let single = {
            let problem = line_problem(&xs, &ys);
            let (_, steps, scheme) = loo_steps(&problem, &[]);
            jackknife_cov(&steps, &scheme).unwrap().v_mat
        };
        let mut xs2 = xs.clone();
        xs2.extend_from_slice(&xs);
        let mut ys2 = ys.clone();
        ys2.extend_from_slice(&ys);
        let double = {
            let problem = line_problem(&xs2, &ys2);
            let (_, steps, scheme) = loo_steps(&problem, &[]);
            jackknife_cov(&steps, &scheme).unwrap().v_mat
        };
        for j in 0..2 {
            let ratio = double[[j, j]] / single[[j, j]];
            assert!((0.4..=0.6).contains(&ratio), "duplication ratio {ratio}");
        }
    }

    #[test]
    fn block_fold_schemes_are_rejected() {
        let mut t = DataTable::new();
        t.push_numeric("i", (0..20).map(|i| i as f64).collect()).unwrap();
        let scheme = make_scheme(&SchemeKind::KFold(4), &t).unwrap();
        let err = jackknife_cov(&[], &scheme).unwrap_err();
        assert!(matches!(err, UqError::SchemeMismatch(_)));
    }

    #[test]
    fn independence_collapses_to_the_step_cross_products() {
        let mut rng = replicate_rng(37, 0);
        let n = 30;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> =
            xs.iter().map(|x| (3.0 * x).cos() + 0.2 * rng.random_range(-1.0..1.0)).collect();
        let problem = line_problem(&xs, &ys);
        let (fit, steps, scheme) = loo_steps(&problem, &[]);
        let opts = AutocorrOptions { use_cv_residuals: false, scaled_by_edf: false };
        let got = autocorr_cov(&problem, &fit, &steps, &scheme, &opts).unwrap();
        let mut want = Array2::<f64>::zeros((2, 2));
        for s in &steps {
            for a in 0..2 {
                for b in 0..2 {
                    want[[a, b]] += s.delta_beta[a] * s.delta_beta[b];
                }
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                assert_abs_diff_eq!(got.v_mat[[a, b]], want[[a, b]], epsilon = 1e-14);
            }
        }
        // jackknife agrees after undoing its (n-1)/n row weight
        let jk = jackknife_cov(&steps, &scheme).unwrap();
        let nf = n as f64;
        for a in 0..2 {
            for b in 0..2 {
                let rescaled = jk.v_mat[[a, b]] * nf / (nf - 1.0);
                assert!(
                    (rescaled - got.v_mat[[a, b]]).abs()
                        <= 1e-6 * got.v_mat[[a, b]].abs().max(1e-12)
                );
            }
        }
    }

    #[test]
    fn white_noise_variance_matches_the_least_squares_formula() {
        let mut rng = replicate_rng(41, 0);
        let n = 500;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> =
            xs.iter().map(|x| 1.0 + 0.5 * x + rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let problem = line_problem(&xs, &ys);
        let (fit, steps, scheme) = loo_steps(&problem, &[]);
        let got = autocorr_cov(&problem, &fit, &steps, &scheme, &AutocorrOptions::default())
            .unwrap();
        // sigma^2 (X'X)^{-1} with the true unit variance
        let xtx = problem.x.t().dot(&problem.x);
        let want = [
            xtx[[1, 1]] / (xtx[[0, 0]] * xtx[[1, 1]] - xtx[[0, 1]] * xtx[[1, 0]]),
            xtx[[0, 0]] / (xtx[[0, 0]] * xtx[[1, 1]] - xtx[[0, 1]] * xtx[[1, 0]]),
        ];
        for j in 0..2 {
            let ratio = got.v_mat[[j, j]] / want[j];
            assert!((0.7..=1.3).contains(&ratio), "variance ratio {ratio} for coef {j}");
        }
    }

    /// Penalized spline problem on independent Gaussian data.
    fn spline_problem(n: usize, seed: u64) -> (Problem, DataTable) {
        let mut rng = replicate_rng(seed, 0);
        let sim = sim_curve(&mut rng, n, CorrKind::White, RespKind::Gaussian);
        let spec = ModelSpec::build(
            &[vec![TermDef::Spline { var: "x".into(), k: 12, m: 2 }]],
            &sim.table,
        )
        .unwrap();
        let x = build_design(&spec, &sim.table).unwrap();
        let problem = Problem::new(
            x,
            Array1::from(sim.table.numeric("y").unwrap().to_vec()),
            spec.pred_cols.clone(),
            spec.penalties().to_vec(),
            FamilyInstance::gaussian(),
        )
        .unwrap();
        (problem, sim.table)
    }

    #[test]
    fn matching_robust_and_sandwich_estimates_leave_only_the_bayes_term() {
        let (problem, _) = spline_problem(80, 43);
        let fit =
            fit_inner(&problem, array![0.0].view(), None, &FitOptions::default()).unwrap();
        let v_f = frequentist_matrix(&problem, &fit);
        let vhat = CovarianceEstimate {
            v_mat: v_f.clone(),
            kind: CovKind::AutocorrRobust,
            nu_hat: None,
            scaled_by_edf: false,
            psd_clipped: false,
            rescale_skipped: 0,
        };
        let out = bayes_bias_correct(&problem, &fit, &vhat).unwrap();
        assert_abs_diff_eq!(out.nu_hat.unwrap(), 1.0, epsilon = 1e-12);
        let want = bayes_cov(&problem, &fit).v_mat;
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in out.v_mat.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn without_penalty_the_bias_term_vanishes() {
        let (problem, _) = spline_problem(80, 47);
        let fit =
            fit_inner(&problem, array![-20.0].view(), None, &FitOptions::default()).unwrap();
        let v_b = bayes_cov(&problem, &fit).v_mat;
        let v_f = frequentist_matrix(&problem, &fit);
        let scale = v_b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = v_b
            .iter()
            .zip(v_f.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-6 * scale, "correction {diff} vs scale {scale}");
    }

    #[test]
    fn corrected_bands_match_large_sample_bayes_on_independent_data() {
        let (problem, _) = spline_problem(1000, 53);
        let mut t = DataTable::new();
        t.push_numeric("i", (0..1000).map(|i| i as f64).collect()).unwrap();
        let scheme = make_scheme(&SchemeKind::Loo, &t).unwrap();
        let opt = crate::optimize::optimize_ncv(
            &problem,
            &scheme,
            array![0.0].view(),
            &NcvOptions::default(),
            &crate::optimize::OptimizeOptions::default(),
        )
        .unwrap();
        let (fit, res) = (opt.fit, opt.ncv);
        let vhat =
            autocorr_cov(&problem, &fit, &res.fold_steps, &scheme, &AutocorrOptions::default())
                .unwrap();
        let corrected = bayes_bias_correct(&problem, &fit, &vhat).unwrap();
        let bayes = bayes_cov(&problem, &fit);
        let bands_c = pointwise_bands(fit.beta.view(), &corrected, problem.x.view(), Z_975);
        let bands_b = pointwise_bands(fit.beta.view(), &bayes, problem.x.view(), Z_975);
        // pointwise ratios fluctuate with the estimator's own sampling
        // noise, so the match is judged across the function
        let mut mean_dev = 0.0;
        let mut mean_ratio = 0.0;
        for i in 0..1000 {
            let ratio = bands_c.se[i] / bands_b.se[i];
            mean_dev += (ratio - 1.0).abs() / 1000.0;
            mean_ratio += ratio / 1000.0;
        }
        assert!(mean_dev <= 0.10, "mean half-width deviation {mean_dev}");
        assert!((mean_ratio - 1.0).abs() <= 0.10, "mean half-width ratio {mean_ratio}");
    }


    #[test]
    fn cv_rescaling_inflates_variance_under_positive_autocorrelation() {
        let rule = Rule::parse("window:4").unwrap();
        let mut wins = 0;
        for rep in 0..10 {
            let mut rng = replicate_rng(59, rep);
            let sim = sim_curve(&mut rng, 300, CorrKind::Ar1, RespKind::Gaussian);
            let spec = ModelSpec::build(
                &[vec![TermDef::Spline { var: "x".into(), k: 12, m: 2 }]],
                &sim.table,
            )
            .unwrap();
            let x = build_design(&spec, &sim.table).unwrap();
            let problem = Problem::new(
                x,
                Array1::from(sim.table.numeric("y").unwrap().to_vec()),
                spec.pred_cols.clone(),
                spec.penalties().to_vec(),
                FamilyInstance::gaussian(),
            )
            .unwrap();
            let scheme =
                make_scheme(&SchemeKind::Neighbourhood(rule.clone()), &sim.table).unwrap();
            let fit =
                fit_inner(&problem, array![2.0].view(), None, &FitOptions::default()).unwrap();
            let res = ncv_criterion(
                &problem,
                &fit,
                &scheme,
                &NcvOptions { want_grad: false, ..NcvOptions::default() },
            )
            .unwrap();
            let plain = autocorr_cov(
                &problem,
                &fit,
                &res.fold_steps,
                &scheme,
                &AutocorrOptions { use_cv_residuals: false, scaled_by_edf: true },
            )
            .unwrap();
            let rescaled = autocorr_cov(
                &problem,
                &fit,
                &res.fold_steps,
                &scheme,
                &AutocorrOptions { use_cv_residuals: true, scaled_by_edf: true },
            )
            .unwrap();
            if rescaled.v_mat.diag().sum() > plain.v_mat.diag().sum() {
                wins += 1;
            }
        }
        assert!(wins >= 9, "cv rescale enlarged the trace in only {wins}/10 replicates");
    }

    #[test]
    fn band_edges_follow_the_covariance() {
        let cov = CovarianceEstimate {
            v_mat: Array2::zeros((3, 3)),
            kind: CovKind::BayesLargeSample,
            nu_hat: None,
            scaled_by_edf: false,
            psd_clipped: false,
            rescale_skipped: 0,
        };
        let x = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 0.0, 1.0, 0.0]).unwrap();
        let beta = array![1.0, -1.0, 0.5];
        let bands = pointwise_bands(beta.view(), &cov, x.view(), Z_975);
        assert_eq!(bands.se, Array1::zeros(2));
        assert_eq!(bands.lo, bands.fit);
        assert_eq!(bands.hi, bands.fit);

        let cov = CovarianceEstimate { v_mat: Array2::eye(3), ..cov };
        let bands = pointwise_bands(beta.view(), &cov, x.view(), Z_975);
        assert_abs_diff_eq!(bands.se[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(bands.hi[1] - bands.fit[1], Z_975, epsilon = 1e-15);
    }
}
