//! Smooth quantile regression pipeline.
//!
//! Three stages: a pilot location-scale fit (cross-validated mean model,
//! then a gamma model for the squared residuals) yielding standardized
//! residuals; bootstrap selection of the quantile-loss smoothing
//! parameter by minimizing the MSE of one-dimensional location fits over
//! shared resamples; and the final cross-validated quantile curve fit
//! with bias-corrected covariance.

use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{quantile_type7, DataError, DataTable};
use crate::fit::{FitError, FittedModel, Problem};
use crate::loss::FamilyInstance;
use crate::model::{build_design, ModelError, ModelSpec, TermDef};
use crate::ncv::{NcvError, NcvOptions};
use crate::optimize::{optimize_ncv, NcvOptimum, OptimizeOptions, OuterResult};
use crate::scheme::{make_scheme, SchemeError, SchemeKind};
use crate::uq::{autocorr_cov, bayes_bias_correct, AutocorrOptions, CovarianceEstimate, UqError};

/// Candidate smoothing values per selection run.
const GRID_LEN: usize = 15;
/// Grid endpoints as multiples of the standardized-residual spread.
const GRID_LO: f64 = 0.01;
const GRID_HI: f64 = 10.0;
/// Tolerated fraction of diverged bootstrap solves.
const DIVERGENCE_BUDGET: f64 = 0.05;

#[derive(Debug, Error)]
pub enum QuantileError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Ncv(#[from] NcvError),
    #[error(transparent)]
    Uq(#[from] UqError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("{0}")]
    BadArgument(String),
    #[error(
        "pilot mean model uses {k_edf:.1} degrees of freedom for {n} data, \
         leaving bootstrap samples of size {boot_size}"
    )]
    PilotDegenerate { n: usize, k_edf: f64, boot_size: usize },
    #[error("{dropped} of {total} bootstrap solves diverged")]
    ExcessiveDivergence { dropped: usize, total: usize },
}

/// Pilot location-scale fit.
#[derive(Debug, Clone)]
pub struct PilotFit {
    pub mu_hat: Array1<f64>,
    pub sigma_hat: Array1<f64>,
    /// Degrees of freedom of the mean model; sets the bootstrap size.
    pub k_edf: f64,
    /// Standardized residuals `(y - mu) / sigma`.
    pub z: Array1<f64>,
}

/// Outcome of the bootstrap smoothing-parameter search.
#[derive(Debug, Clone)]
pub struct ElfSelection {
    pub lambda_grid: Vec<f64>,
    pub mse: Vec<f64>,
    pub lambda_star: f64,
    pub n_boot: usize,
    pub boot_size: usize,
    /// Diverged solves that were dropped (within budget).
    pub dropped: usize,
}

/// Final quantile model with its covariance.
#[derive(Debug)]
pub struct QuantileFit {
    pub problem: Problem,
    pub fit: FittedModel,
    pub outer: OuterResult,
    pub covariance: CovarianceEstimate,
    /// Fraction of responses below the fitted quantile; should sit
    /// near tau.
    pub proportion_below: f64,
}

fn build_problem(
    table: &DataTable,
    y: Array1<f64>,
    terms: &[Vec<TermDef>],
    family: FamilyInstance,
) -> Result<(ModelSpec, Problem), QuantileError> {
    let spec = ModelSpec::build(terms, table)?;
    let x = build_design(&spec, table)?;
    let problem = Problem::new(x, y, spec.pred_cols.clone(), spec.penalties().to_vec(), family)?;
    Ok((spec, problem))
}

fn ncv_fit(
    table: &DataTable,
    problem: &Problem,
    opts: &OptimizeOptions,
) -> Result<NcvOptimum, QuantileError> {
    let scheme = make_scheme(&SchemeKind::Loo, table)?;
    let rho0 = Array1::<f64>::zeros(problem.m());
    Ok(optimize_ncv(problem, &scheme, rho0.view(), &NcvOptions::default(), opts)?)
}

/// Fits the pilot mean and variance models and standardizes the
/// residuals. The variance model is a gamma fit with log link to the
/// squared residuals (squared Gaussian-like residuals have dispersion
/// 2, hence the fixed scale).
pub fn pilot_fit(
    table: &DataTable,
    response: &str,
    mean_terms: &[Vec<TermDef>],
    var_terms: &[Vec<TermDef>],
    opts: &OptimizeOptions,
) -> Result<PilotFit, QuantileError> {
    let y = Array1::from(table.numeric(response)?.to_vec());
    let n = y.len();
    let (_, problem) = build_problem(table, y.clone(), mean_terms, FamilyInstance::gaussian())?;
    let mean_opt = ncv_fit(table, &problem, opts)?;
    let mu_hat = mean_opt.fit.eta.column(0).to_owned();
    let k_edf = mean_opt.fit.edf;
    let boot = boot_size(n, k_edf);
    if boot < 2 {
        return Err(QuantileError::PilotDegenerate { n, k_edf, boot_size: boot });
    }

    let r2: Array1<f64> = (&y - &mu_hat).mapv(|r| r * r);
    let var_floor = 1e-8 * r2.sum() / n as f64;
    let (_, vproblem) =
        build_problem(table, r2, var_terms, FamilyInstance::gamma_log(2.0))?;
    let var_opt = ncv_fit(table, &vproblem, opts)?;
    let sigma_hat: Array1<f64> =
        var_opt.fit.eta.column(0).mapv(|eta| eta.exp().max(var_floor).sqrt());
    let z = (&y - &mu_hat) / &sigma_hat;
    Ok(PilotFit { mu_hat, sigma_hat, k_edf, z })
}

/// Bootstrap sample size implied by the pilot degrees of freedom.
pub fn boot_size(n: usize, k_edf: f64) -> usize {
    (n as f64 / k_edf).ceil() as usize
}

/// One-dimensional quantile-loss location fit by safeguarded Newton
/// from `start`. The objective is strictly convex, so its gradient is
/// increasing in the location: a sign-change bracket always pins the
/// minimizer, Newton runs inside it, and bisection takes over when the
/// nearly piecewise-linear small-smoothing loss leaves no usable
/// curvature. `None` marks a nonfinite gradient or an unbracketable
/// solution.
pub fn elf_location(z: &[f64], tau: f64, lambda: f64, start: f64) -> Option<f64> {
    let family = FamilyInstance::elf(tau, lambda, vec![1.0]);
    let grad = |q: f64| -> (f64, f64) {
        let mut g = 0.0;
        let mut h = 0.0;
        for &zi in z {
            let ev = family.eval(0, zi, &[q], 2);
            g += ev.d1[0];
            h += ev.d2[0];
        }
        (g, h)
    };
    let (g0, _) = grad(start);
    if !g0.is_finite() {
        return None;
    }
    if g0 == 0.0 {
        return Some(start);
    }
    let spread = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
        - z.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let mut width = (spread + lambda).max(1e-8);
    let (mut lo, mut hi) = (start, start);
    loop {
        if g0 > 0.0 {
            lo = hi - width;
            let g = grad(lo).0;
            if !g.is_finite() {
                return None;
            }
            if g <= 0.0 {
                break;
            }
            hi = lo;
        } else {
            hi = lo + width;
            let g = grad(hi).0;
            if !g.is_finite() {
                return None;
            }
            if g >= 0.0 {
                break;
            }
            lo = hi;
        }
        width *= 2.0;
        if width > 1e12 {
            return None;
        }
    }

    let mut q = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (g, h) = grad(q);
        if !g.is_finite() || !h.is_finite() {
            return None;
        }
        if g > 0.0 {
            hi = q;
        } else if g < 0.0 {
            lo = q;
        } else {
            return Some(q);
        }
        let newton = q - g / h;
        let next = if h > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - q).abs() <= 1e-12 * (1.0 + q.abs()) {
            return Some(next);
        }
        q = next;
    }
    Some(q)
}

/// Picks the loss-smoothing value by the MSE of bootstrap location
/// fits. The same resamples serve every candidate so the MSE curve is
/// smooth in the candidate value; the target is the whole-sample tau
/// quantile of the standardized residuals, which also seeds each
/// Newton solve.
pub fn select_elf_lambda(
    pilot: &PilotFit,
    tau: f64,
    n_boot: usize,
    seed: u64,
) -> Result<ElfSelection, QuantileError> {
    select_elf_lambda_grid(pilot, tau, GRID_LEN, n_boot, seed)
}

/// As [`select_elf_lambda`] but with a caller-chosen number of
/// log-spaced candidates over the same bracket.
pub fn select_elf_lambda_grid(
    pilot: &PilotFit,
    tau: f64,
    grid_len: usize,
    n_boot: usize,
    seed: u64,
) -> Result<ElfSelection, QuantileError> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(QuantileError::BadArgument(format!("tau {tau} outside (0,1)")));
    }
    if n_boot < 50 {
        return Err(QuantileError::BadArgument(format!("n_boot {n_boot} < 50")));
    }
    if grid_len < 2 {
        return Err(QuantileError::BadArgument(format!("grid length {grid_len} < 2")));
    }
    let z = pilot.z.as_slice().expect("contiguous");
    let n = z.len();
    let boot = boot_size(n, pilot.k_edf);
    if boot < 2 {
        return Err(QuantileError::PilotDegenerate { n, k_edf: pilot.k_edf, boot_size: boot });
    }

    let mean = z.iter().sum::<f64>() / n as f64;
    let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let lambda_grid: Vec<f64> = (0..grid_len)
        .map(|i| sd * GRID_LO * (GRID_HI / GRID_LO).powf(i as f64 / (grid_len - 1) as f64))
        .collect();
    let target = quantile_type7(z, tau);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resamples: Vec<Vec<f64>> = (0..n_boot)
        .map(|_| (0..boot).map(|_| z[rng.random_range(0..n)]).collect())
        .collect();

    let mut mse = Vec::with_capacity(grid_len);
    let mut dropped = 0usize;
    for &lambda in &lambda_grid {
        let mut sum = 0.0;
        let mut kept = 0usize;
        for sample in &resamples {
            match elf_location(sample, tau, lambda, target) {
                Some(q) => {
                    sum += (q - target).powi(2);
                    kept += 1;
                }
                None => dropped += 1,
            }
        }
        mse.push(if kept > 0 { sum / kept as f64 } else { f64::INFINITY });
    }
    let total = grid_len * n_boot;
    if dropped as f64 > DIVERGENCE_BUDGET * total as f64 {
        return Err(QuantileError::ExcessiveDivergence { dropped, total });
    }
    let best = mse
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("nonempty grid");
    Ok(ElfSelection {
        lambda_star: lambda_grid[best],
        lambda_grid,
        mse,
        n_boot,
        boot_size: boot,
        dropped,
    })
}

/// Final quantile curve: quantile loss with the selected smoothing and
/// the pilot scales, smoothing parameters by leave-one-out cross
/// validation, covariance by the robust estimator plus the Bayesian
/// bias correction.
pub fn fit_quantile(
    table: &DataTable,
    response: &str,
    terms: &[Vec<TermDef>],
    tau: f64,
    pilot: &PilotFit,
    selection: &ElfSelection,
    opts: &OptimizeOptions,
) -> Result<QuantileFit, QuantileError> {
    let y = Array1::from(table.numeric(response)?.to_vec());
    let family = FamilyInstance::elf(tau, selection.lambda_star, pilot.sigma_hat.to_vec());
    let (_, problem) = build_problem(table, y, terms, family)?;
    let scheme = make_scheme(&SchemeKind::Loo, table)?;
    let rho0 = Array1::<f64>::zeros(problem.m());
    let opt = optimize_ncv(&problem, &scheme, rho0.view(), &NcvOptions::default(), opts)?;
    let vhat =
        autocorr_cov(&problem, &opt.fit, &opt.ncv.fold_steps, &scheme, &AutocorrOptions::default())?;
    let covariance = bayes_bias_correct(&problem, &opt.fit, &vhat)?;
    let below = (0..problem.n())
        .filter(|&i| problem.y[i] < opt.fit.eta[[i, 0]])
        .count() as f64
        / problem.n() as f64;
    Ok(QuantileFit {
        problem,
        fit: opt.fit,
        outer: opt.outer,
        covariance,
        proportion_below: below,
    })
}

/// End-to-end pipeline: pilot fit, smoothing selection, final fit.
pub fn quantile_pipeline(
    table: &DataTable,
    response: &str,
    mean_terms: &[Vec<TermDef>],
    var_terms: &[Vec<TermDef>],
    q_terms: &[Vec<TermDef>],
    tau: f64,
    n_boot: usize,
    seed: u64,
    opts: &OptimizeOptions,
) -> Result<(PilotFit, ElfSelection, QuantileFit), QuantileError> {
    let pilot = pilot_fit(table, response, mean_terms, var_terms, opts)?;
    let selection = select_elf_lambda(&pilot, tau, n_boot, seed)?;
    let qfit = fit_quantile(table, response, q_terms, tau, &pilot, &selection, opts)?;
    Ok((pilot, selection, qfit))
}
