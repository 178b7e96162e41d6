//! The `fit` subcommand: read data, build the model, minimize the
//! criterion, estimate the covariance, and write the artifact set
//! (`summary.json`, `coefficients.csv`, `covariance_<kind>.csv`,
//! `bands.csv`, `trace.jsonl`).

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array2};

use ncv_core::{
    autocorr_cov, bayes_bias_correct, bayes_cov, build_design, jackknife_cov, make_scheme,
    optimize_ncv, pointwise_bands, AutocorrOptions, BandTable, CovarianceEstimate, FittedModel,
    ModelSpec, NcvOptions, Problem, Z_975,
};

use crate::artifacts::{
    coef_names, outer_summary, write_bands, write_coefficients, write_covariance, write_json,
    write_trace, FitSummary, InnerSummary, TermEdf, Timings, UqFlags, SCHEMA_VERSION,
};
use crate::config::{
    parse_family, parse_formulas, parse_scheme, parse_uq, parse_variant, RunConfig, UqRegime,
};
use crate::ingest::read_csv;
use crate::CliError;

/// A completed fit run: the summary that was written and whether any
/// convergence warning should surface as exit code 2.
#[derive(Debug)]
pub struct FitRun {
    pub summary: FitSummary,
    pub warning: bool,
    pub out_dir: PathBuf,
}

/// Diagonal of `H_lam^{-1} H`; its sum is the effective degrees of
/// freedom and block-wise partial sums attribute them to terms.
fn hat_diagonal(fit: &FittedModel) -> Array1<f64> {
    let p = fit.beta.len();
    let mut diag = Array1::<f64>::zeros(p);
    for j in 0..p {
        diag[j] = fit.r0.solve(fit.h.column(j))[j];
    }
    diag
}

fn edf_by_term(spec: &ModelSpec, diag: &Array1<f64>) -> Vec<TermEdf> {
    spec.blocks
        .iter()
        .map(|block| {
            let edf = block.cols.clone().map(|j| diag[j]).sum();
            let label = if spec.k > 1 {
                format!("p{}:{}", block.predictor, block.label)
            } else {
                block.label.clone()
            };
            TermEdf { label, edf }
        })
        .collect()
}

pub fn run_fit(cfg: &RunConfig) -> Result<FitRun, CliError> {
    let t_total = Instant::now();

    let t_read = Instant::now();
    let table = read_csv(&cfg.data)?;
    let terms = parse_formulas(&cfg.formula)?;
    let family = parse_family(&cfg.family, cfg.phi)?;
    let variant = parse_variant(&cfg.variant, cfg.gamma)?;
    let regime = parse_uq(&cfg.uq)?;
    let scheme_kind = parse_scheme(&cfg.scheme)?;
    let spec = ModelSpec::build(&terms, &table)?;
    let x = build_design(&spec, &table)?;
    let y = Array1::from(table.numeric(&cfg.response)?.to_vec());
    let problem = Problem::new(x, y, spec.pred_cols.clone(), spec.penalties().to_vec(), family)?;
    let scheme = make_scheme(&scheme_kind, &table)?;
    let read_s = t_read.elapsed().as_secs_f64();

    let m = problem.m();
    let rho0 = match &cfg.rho0 {
        Some(r) if r.len() == m => Array1::from(r.clone()),
        Some(r) => {
            return Err(CliError::Invalid(format!(
                "rho0 has {} entries but the model has {m} smoothing parameters",
                r.len()
            )))
        }
        None => Array1::zeros(m),
    };
    let opts = cfg.optimizer.to_options();
    let ncv_opts = NcvOptions { variant, want_grad: true };

    let t_fit = Instant::now();
    let opt = optimize_ncv(&problem, &scheme, rho0.view(), &ncv_opts, &opts)?;
    let fit_s = t_fit.elapsed().as_secs_f64();

    let t_uq = Instant::now();
    let cov = match regime {
        UqRegime::None => None,
        UqRegime::Jackknife => Some(jackknife_cov(&opt.ncv.fold_steps, &scheme)?),
        UqRegime::Robust => Some(autocorr_cov(
            &problem,
            &opt.fit,
            &opt.ncv.fold_steps,
            &scheme,
            &AutocorrOptions::default(),
        )?),
        UqRegime::Corrected => {
            let vhat = autocorr_cov(
                &problem,
                &opt.fit,
                &opt.ncv.fold_steps,
                &scheme,
                &AutocorrOptions::default(),
            )?;
            Some(bayes_bias_correct(&problem, &opt.fit, &vhat)?)
        }
        UqRegime::Bayes => Some(bayes_cov(&problem, &opt.fit)),
    };
    let uq_s = t_uq.elapsed().as_secs_f64();

    let t_write = Instant::now();
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|source| CliError::Write { path: cfg.out_dir.clone(), source })?;
    let names = coef_names(&spec);
    let mut outputs = Vec::new();

    let trace_path = cfg.out_dir.join("trace.jsonl");
    write_trace(&trace_path, &opt.outer.trace)?;
    outputs.push("trace.jsonl".to_owned());

    let se = cov.as_ref().map(|c| {
        Array1::from_iter((0..problem.p()).map(|j| c.v_mat[[j, j]].max(0.0).sqrt()))
    });
    write_coefficients(&cfg.out_dir.join("coefficients.csv"), &names, &opt.fit.beta, se.as_ref())?;
    outputs.push("coefficients.csv".to_owned());

    if let Some(c) = &cov {
        let cov_name = format!("covariance_{}.csv", c.kind.label());
        write_covariance(&cfg.out_dir.join(&cov_name), &names, &c.v_mat)?;
        outputs.push(cov_name);

        let bands = predictor_bands(&problem, &opt.fit, c);
        write_bands(&cfg.out_dir.join("bands.csv"), &bands)?;
        outputs.push("bands.csv".to_owned());
    }
    let write_s = t_write.elapsed().as_secs_f64();

    let diag = hat_diagonal(&opt.fit);
    let mut warnings = Vec::new();
    let outer = outer_summary(&opt.outer);
    if !outer.converged {
        warnings.push(format!("outer optimizer stopped: {}", outer.status));
    }
    if !opt.fit.converged {
        warnings.push("inner fit did not converge".to_owned());
    }
    if opt.ncv.n_singular > 0 {
        warnings.push(format!("{} fold systems were singular", opt.ncv.n_singular));
    }
    let warning = !warnings.is_empty();

    let summary = FitSummary {
        schema_version: SCHEMA_VERSION,
        command: "fit".to_owned(),
        n: problem.n(),
        p: problem.p(),
        m,
        family: cfg.family.clone(),
        scheme: scheme.label.clone(),
        variant: cfg.variant.clone(),
        uq: cfg.uq.clone(),
        seed: cfg.seed,
        value: opt.ncv.value,
        rho: opt.fit.rho.to_vec(),
        lambda: opt.fit.lambda.clone(),
        edf: opt.fit.edf,
        edf_by_term: edf_by_term(&spec, &diag),
        n_indefinite: opt.ncv.n_indefinite,
        n_singular: opt.ncv.n_singular,
        nu_hat: cov.as_ref().and_then(|c| c.nu_hat),
        outer,
        inner: InnerSummary {
            converged: opt.fit.converged,
            iters: opt.fit.iters,
            hessian_repaired: opt.fit.hessian_repaired,
        },
        uq_flags: cov.as_ref().map(|c| UqFlags {
            kind: c.kind.label().to_owned(),
            scaled_by_edf: c.scaled_by_edf,
            psd_clipped: c.psd_clipped,
            rescale_skipped: c.rescale_skipped,
        }),
        warnings,
        timings: Timings {
            read_s,
            fit_s,
            uq_s,
            write_s,
            total_s: t_total.elapsed().as_secs_f64(),
        },
        outputs: {
            let mut o = vec!["summary.json".to_owned()];
            o.extend(outputs);
            o
        },
    };
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;

    Ok(FitRun { summary, warning, out_dir: cfg.out_dir.clone() })
}

/// One band table per linear predictor over the training rows; the
/// design with the other predictors' columns zeroed isolates each
/// predictor's contribution.
fn predictor_bands(
    problem: &Problem,
    fit: &FittedModel,
    cov: &CovarianceEstimate,
) -> Vec<(usize, BandTable)> {
    let kk = problem.family.k();
    (0..kk)
        .map(|k| {
            let mut masked = Array2::<f64>::zeros(problem.x.raw_dim());
            for &col in &problem.pred_cols[k] {
                masked.column_mut(col).assign(&problem.x.column(col));
            }
            (k, pointwise_bands(fit.beta.view(), cov, masked.view(), Z_975))
        })
        .collect()
}
