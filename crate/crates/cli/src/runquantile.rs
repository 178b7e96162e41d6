//! The `quantile` subcommand: pilot location/scale fit, bootstrap
//! selection of the loss smoothing, and the final penalized quantile
//! fit with its corrected covariance.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array1;

use ncv_core::{pilot_fit, fit_quantile, select_elf_lambda_grid, ModelSpec, Z_975};

use crate::artifacts::{
    coef_names, outer_summary, write_bands, write_coefficients, write_covariance, write_json,
    write_trace, QuantileSummary, Timings, SCHEMA_VERSION,
};
use crate::config::{parse_formulas, QuantileConfig};
use crate::ingest::read_csv;
use crate::CliError;

#[derive(Debug)]
pub struct QuantileRun {
    pub summary: QuantileSummary,
    pub warning: bool,
    pub out_dir: PathBuf,
}

pub fn run_quantile(cfg: &QuantileConfig) -> Result<QuantileRun, CliError> {
    let t_total = Instant::now();

    let t_read = Instant::now();
    let table = read_csv(&cfg.data)?;
    let mean_terms = parse_formulas(&cfg.mean_formula)?;
    let var_terms = parse_formulas(&cfg.var_formula)?;
    let q_terms = parse_formulas(&cfg.q_formula)?;
    let read_s = t_read.elapsed().as_secs_f64();

    let opts = cfg.optimizer.to_options();
    let t_fit = Instant::now();
    let pilot = pilot_fit(&table, &cfg.response, &mean_terms, &var_terms, &opts)?;
    let selection = select_elf_lambda_grid(&pilot, cfg.tau, cfg.grid, cfg.n_boot, cfg.seed)?;
    let qfit = fit_quantile(&table, &cfg.response, &q_terms, cfg.tau, &pilot, &selection, &opts)?;
    let fit_s = t_fit.elapsed().as_secs_f64();

    let t_write = Instant::now();
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|source| CliError::Write { path: cfg.out_dir.clone(), source })?;
    let spec = ModelSpec::build(&q_terms, &table)?;
    let names = coef_names(&spec);
    let mut outputs = vec!["summary.json".to_owned()];

    write_trace(&cfg.out_dir.join("trace.jsonl"), &qfit.outer.trace)?;
    outputs.push("trace.jsonl".to_owned());

    let se = Array1::from_iter(
        (0..qfit.fit.beta.len()).map(|j| qfit.covariance.v_mat[[j, j]].max(0.0).sqrt()),
    );
    write_coefficients(
        &cfg.out_dir.join("coefficients.csv"),
        &names,
        &qfit.fit.beta,
        Some(&se),
    )?;
    outputs.push("coefficients.csv".to_owned());

    let cov_name = format!("covariance_{}.csv", qfit.covariance.kind.label());
    write_covariance(&cfg.out_dir.join(&cov_name), &names, &qfit.covariance.v_mat)?;
    outputs.push(cov_name);

    let bands = ncv_core::pointwise_bands(
        qfit.fit.beta.view(),
        &qfit.covariance,
        qfit.problem.x.view(),
        Z_975,
    );
    write_bands(&cfg.out_dir.join("bands.csv"), &[(0, bands)])?;
    outputs.push("bands.csv".to_owned());
    let write_s = t_write.elapsed().as_secs_f64();

    let outer = outer_summary(&qfit.outer);
    let mut warnings = Vec::new();
    if !outer.converged {
        warnings.push(format!("outer optimizer stopped: {}", outer.status));
    }
    if !qfit.fit.converged {
        warnings.push("inner fit did not converge".to_owned());
    }
    if selection.dropped > 0 {
        warnings.push(format!("{} bootstrap location solves diverged", selection.dropped));
    }
    let warning = !outer.converged || !qfit.fit.converged;

    let summary = QuantileSummary {
        schema_version: SCHEMA_VERSION,
        command: "quantile".to_owned(),
        n: table.n(),
        tau: cfg.tau,
        seed: cfg.seed,
        k_edf: pilot.k_edf,
        boot_size: selection.boot_size,
        n_boot: selection.n_boot,
        lambda_grid: selection.lambda_grid.clone(),
        mse: selection.mse.iter().map(|&m| m.is_finite().then_some(m)).collect(),
        lambda_star: selection.lambda_star,
        dropped_solves: selection.dropped,
        value: qfit.outer.value,
        rho: qfit.fit.rho.to_vec(),
        lambda: qfit.fit.lambda.clone(),
        edf: qfit.fit.edf,
        proportion_below: qfit.proportion_below,
        nu_hat: qfit.covariance.nu_hat,
        outer,
        warnings,
        timings: Timings {
            read_s,
            fit_s,
            uq_s: 0.0,
            write_s,
            total_s: t_total.elapsed().as_secs_f64(),
        },
        outputs,
    };
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(QuantileRun { summary, warning, out_dir: cfg.out_dir.clone() })
}
