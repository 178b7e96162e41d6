//! The `sim` subcommand: coverage/MSE studies over synthetic
//! replicates. Each replicate simulates one data set, fits it under
//! every configured criterion (neighbourhood NCV, leave-one-out NCV,
//! GCV, and for Gaussian responses the restricted likelihood), records
//! the across-function coverage of the nominal 95% band and the mean
//! squared error of the fitted signal, and the harness averages the
//! records into one table row per method.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;

use ncv_core::{
    autocorr_cov, bayes_bias_correct, bayes_cov, build_design, fit_quantile, make_scheme,
    optimize_ncv, pilot_fit, pointwise_bands, replicate_rng, select_elf_lambda_grid, sim_curve,
    sim_spatial, sim_quantile, AutocorrOptions, CorrKind, CovarianceEstimate, DataTable,
    FamilyInstance, FittedModel, ModelSpec, NcvOptions, OptimizeOptions, Problem, RespKind,
    SchemeKind, SimData, TermDef, Z_975, GAMMA_PHI,
};

use crate::artifacts::{
    write_json, write_replicates, write_simtable, ReplicateRow, SimRow, SimSummary,
    Timings, SCHEMA_VERSION,
};
use crate::comparators::{optimize_gcv, optimize_reml};
use crate::config::{parse_scheme, SimRecipe};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SimKind {
    Ar1Curve,
    MaCurve,
    SpatialMa,
    Quantile,
}

/// Validated recipe with every default resolved.
struct Study {
    kind: SimKind,
    n: usize,
    grid: usize,
    resp: RespKind,
    replicates: usize,
    k: usize,
    scheme: String,
    tau: f64,
    n_boot: usize,
    seed: u64,
    out_dir: PathBuf,
    opts: OptimizeOptions,
}

fn parse_recipe(cfg: &SimRecipe) -> Result<Study, CliError> {
    let kind = match cfg.kind.as_str() {
        "ar1_1d" => SimKind::Ar1Curve,
        "ma_1d" => SimKind::MaCurve,
        "spatial_ma" => SimKind::SpatialMa,
        "quantile_sim" => SimKind::Quantile,
        other => return Err(CliError::Invalid(format!("unknown simulation kind {other:?}"))),
    };
    let resp = match cfg.family.as_str() {
        "gaussian" => RespKind::Gaussian,
        "poisson" => RespKind::Poisson,
        "gamma" => RespKind::Gamma,
        other => {
            return Err(CliError::Invalid(format!("unknown simulation family {other:?}")))
        }
    };
    let study = Study {
        kind,
        n: cfg.n.unwrap_or(1000),
        grid: cfg.grid.unwrap_or(18),
        resp,
        replicates: cfg.replicates,
        k: cfg.k.unwrap_or(match kind {
            SimKind::SpatialMa => 8,
            SimKind::Quantile => 10,
            _ => 20,
        }),
        scheme: cfg.scheme.clone().unwrap_or_else(|| match kind {
            SimKind::SpatialMa => "square:2:x:z".to_owned(),
            _ => "window:4".to_owned(),
        }),
        tau: cfg.tau.unwrap_or(0.95),
        n_boot: cfg.n_boot.unwrap_or(100),
        seed: cfg.seed,
        out_dir: cfg.out_dir.clone(),
        opts: cfg.optimizer.to_options(),
    };
    if study.replicates == 0 {
        return Err(CliError::Invalid("replicates must be positive".into()));
    }
    if study.n < 10 || study.grid < 4 || study.k < 4 {
        return Err(CliError::Invalid("simulation sizes too small to fit".into()));
    }
    if !(0.0 < study.tau && study.tau < 1.0) {
        return Err(CliError::Invalid(format!("tau {} outside (0,1)", study.tau)));
    }
    if kind == SimKind::Quantile && resp != RespKind::Gaussian {
        return Err(CliError::Invalid("the quantile recipe draws its own responses".into()));
    }
    parse_scheme(&study.scheme)?;
    Ok(study)
}

/// Per-method record from one replicate.
#[derive(Debug, Clone)]
struct MethodRecord {
    method: &'static str,
    coverage: f64,
    mse: f64,
    exceedance: Option<f64>,
    edf: f64,
    value: f64,
    rho: Vec<f64>,
}

struct ReplicateOutcome {
    records: Vec<MethodRecord>,
    signal_to_noise: Option<f64>,
}

fn family_for(resp: RespKind) -> FamilyInstance {
    match resp {
        RespKind::Gaussian => FamilyInstance::gaussian(),
        RespKind::Poisson => FamilyInstance::poisson_log(),
        RespKind::Gamma => FamilyInstance::gamma_log(GAMMA_PHI),
    }
}

fn build_problem(
    table: &DataTable,
    terms: &[Vec<TermDef>],
    family: FamilyInstance,
) -> Result<Problem, CliError> {
    let spec = ModelSpec::build(terms, table)?;
    let x = build_design(&spec, table)?;
    let y = Array1::from(table.numeric("y")?.to_vec());
    Ok(Problem::new(x, y, spec.pred_cols.clone(), spec.penalties().to_vec(), family)?)
}

/// Coverage of the truth by the 95% band on the linear predictor, plus
/// the mean squared error of the fitted signal.
fn band_score(
    problem: &Problem,
    fit: &FittedModel,
    cov: &CovarianceEstimate,
    truth: &Array1<f64>,
) -> (f64, f64) {
    let bands = pointwise_bands(fit.beta.view(), cov, problem.x.view(), Z_975);
    let n = truth.len();
    let mut hits = 0usize;
    let mut mse = 0.0;
    for i in 0..n {
        if truth[i] >= bands.lo[i] && truth[i] <= bands.hi[i] {
            hits += 1;
        }
        mse += (bands.fit[i] - truth[i]).powi(2);
    }
    (hits as f64 / n as f64, mse / n as f64)
}

fn curve_replicate(study: &Study, rep: usize) -> Result<ReplicateOutcome, CliError> {
    let mut rng = replicate_rng(study.seed, rep as u64);
    let sim: SimData = match study.kind {
        SimKind::Ar1Curve => sim_curve(&mut rng, study.n, CorrKind::Ar1, study.resp),
        SimKind::MaCurve => sim_curve(&mut rng, study.n, CorrKind::Ma, study.resp),
        SimKind::SpatialMa => sim_spatial(&mut rng, study.grid, study.resp),
        SimKind::Quantile => unreachable!("handled by quantile_replicate"),
    };
    let terms = match study.kind {
        SimKind::SpatialMa => vec![vec![TermDef::Tensor {
            vars: ["x".into(), "z".into()],
            k: [study.k, study.k],
            m: 2,
        }]],
        _ => vec![vec![TermDef::Spline { var: "x".into(), k: study.k, m: 2 }]],
    };
    let family = family_for(study.resp);
    let problem = build_problem(&sim.table, &terms, family)?;
    let rho0 = Array1::<f64>::zeros(problem.m());
    let mut records = Vec::new();

    // neighbourhood NCV with the paper-style corrected covariance
    let nei = make_scheme(&parse_scheme(&study.scheme)?, &sim.table)?;
    for (method, scheme) in
        [("ncv", nei), ("ncv_loo", make_scheme(&SchemeKind::Loo, &sim.table)?)]
    {
        let opt =
            optimize_ncv(&problem, &scheme, rho0.view(), &NcvOptions::default(), &study.opts)?;
        let vhat = autocorr_cov(
            &problem,
            &opt.fit,
            &opt.ncv.fold_steps,
            &scheme,
            &AutocorrOptions::default(),
        )?;
        let cov = bayes_bias_correct(&problem, &opt.fit, &vhat)?;
        let (coverage, mse) = band_score(&problem, &opt.fit, &cov, &sim.truth);
        records.push(MethodRecord {
            method,
            coverage,
            mse,
            exceedance: None,
            edf: opt.fit.edf,
            value: opt.ncv.value,
            rho: opt.fit.rho.to_vec(),
        });
    }

    // independence-assuming baselines with their usual Bayesian bands
    let gcv = optimize_gcv(&problem, rho0.view(), &study.opts)?;
    let cov = bayes_cov(&problem, &gcv.fit);
    let (coverage, mse) = band_score(&problem, &gcv.fit, &cov, &sim.truth);
    records.push(MethodRecord {
        method: "gcv",
        coverage,
        mse,
        exceedance: None,
        edf: gcv.fit.edf,
        value: gcv.value,
        rho: gcv.fit.rho.to_vec(),
    });

    if study.resp == RespKind::Gaussian {
        let reml = optimize_reml(&problem, rho0.view(), &study.opts)?;
        let cov = bayes_cov(&problem, &reml.fit);
        let (coverage, mse) = band_score(&problem, &reml.fit, &cov, &sim.truth);
        records.push(MethodRecord {
            method: "reml",
            coverage,
            mse,
            exceedance: None,
            edf: reml.fit.edf,
            value: reml.value,
            rho: reml.fit.rho.to_vec(),
        });
    }

    let signal_to_noise = match study.resp {
        RespKind::Gaussian => {
            let sd = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
            };
            let resid: Vec<f64> =
                problem.y.iter().zip(&sim.truth).map(|(y, f)| y - f).collect();
            let truth: Vec<f64> = sim.truth.to_vec();
            Some(sd(&truth) / sd(&resid))
        }
        _ => None,
    };
    Ok(ReplicateOutcome { records, signal_to_noise })
}

fn quantile_replicate(study: &Study, rep: usize) -> Result<ReplicateOutcome, CliError> {
    let mut rng = replicate_rng(study.seed, rep as u64);
    let sim = sim_quantile(&mut rng, study.n, study.tau);
    let terms = vec![vec![TermDef::Spline { var: "x".into(), k: study.k, m: 2 }]];
    let pilot = pilot_fit(&sim.table, "y", &terms, &terms, &study.opts)?;
    // independent selection randomness per replicate
    let sel_seed = study.seed ^ (rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let selection = select_elf_lambda_grid(&pilot, study.tau, 15, study.n_boot, sel_seed)?;
    let qfit = fit_quantile(&sim.table, "y", &terms, study.tau, &pilot, &selection, &study.opts)?;
    let (coverage, mse) = band_score(&qfit.problem, &qfit.fit, &qfit.covariance, &sim.truth);
    Ok(ReplicateOutcome {
        records: vec![MethodRecord {
            method: "ncv_quantile",
            coverage,
            mse,
            exceedance: Some(1.0 - qfit.proportion_below),
            edf: qfit.fit.edf,
            value: qfit.outer.value,
            rho: qfit.fit.rho.to_vec(),
        }],
        signal_to_noise: None,
    })
}

#[derive(Debug)]
pub struct SimRun {
    pub summary: SimSummary,
    pub out_dir: PathBuf,
}

pub fn run_sim(cfg: &SimRecipe) -> Result<SimRun, CliError> {
    let t_total = Instant::now();
    let study = parse_recipe(cfg)?;

    let outcomes: Vec<Result<ReplicateOutcome, String>> = (0..study.replicates)
        .into_par_iter()
        .map(|rep| {
            let run = match study.kind {
                SimKind::Quantile => quantile_replicate(&study, rep),
                _ => curve_replicate(&study, rep),
            };
            run.map_err(|e| format!("replicate {rep}: {e}"))
        })
        .collect();

    let mut failure_messages = Vec::new();
    let mut replicate_rows = Vec::new();
    let mut s2n_sum = 0.0;
    let mut s2n_count = 0usize;
    let mut per_method: Vec<(&'static str, Vec<(f64, f64, Option<f64>)>)> = Vec::new();
    for (rep, outcome) in outcomes.iter().enumerate() {
        match outcome {
            Ok(out) => {
                if let Some(s) = out.signal_to_noise {
                    s2n_sum += s;
                    s2n_count += 1;
                }
                for rec in &out.records {
                    replicate_rows.push(ReplicateRow {
                        replicate: rep,
                        method: rec.method.to_owned(),
                        coverage: rec.coverage,
                        mse: rec.mse,
                        exceedance: rec.exceedance,
                        edf: rec.edf,
                        value: rec.value,
                        rho: rec.rho.clone(),
                    });
                    match per_method.iter_mut().find(|(m, _)| *m == rec.method) {
                        Some((_, v)) => v.push((rec.coverage, rec.mse, rec.exceedance)),
                        None => per_method
                            .push((rec.method, vec![(rec.coverage, rec.mse, rec.exceedance)])),
                    }
                }
            }
            Err(msg) => {
                if failure_messages.len() < 10 {
                    failure_messages.push(msg.clone());
                }
            }
        }
    }
    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    if failed * 10 > study.replicates {
        return Err(CliError::TooManyFailures { failed, total: study.replicates });
    }

    let rows: Vec<SimRow> = per_method
        .iter()
        .map(|(method, vals)| {
            let r = vals.len() as f64;
            let coverage = vals.iter().map(|v| v.0).sum::<f64>() / r;
            let mse = vals.iter().map(|v| v.1).sum::<f64>() / r;
            let exceedances: Vec<f64> = vals.iter().filter_map(|v| v.2).collect();
            let exceedance = (!exceedances.is_empty())
                .then(|| exceedances.iter().sum::<f64>() / exceedances.len() as f64);
            SimRow {
                method: (*method).to_owned(),
                coverage,
                mse,
                exceedance,
                failures: failed,
                replicates: vals.len(),
            }
        })
        .collect();

    std::fs::create_dir_all(&study.out_dir)
        .map_err(|source| CliError::Write { path: study.out_dir.clone(), source })?;
    write_simtable(&study.out_dir.join("simtable.csv"), &rows)?;
    write_replicates(&study.out_dir.join("replicates.csv"), &replicate_rows)?;

    let summary = SimSummary {
        schema_version: SCHEMA_VERSION,
        command: "sim".to_owned(),
        kind: cfg.kind.clone(),
        family: cfg.family.clone(),
        n: if study.kind == SimKind::SpatialMa { study.grid * study.grid } else { study.n },
        replicates: study.replicates,
        seed: study.seed,
        scheme: study.scheme.clone(),
        signal_to_noise: (s2n_count > 0).then(|| s2n_sum / s2n_count as f64),
        failures: failed,
        failure_messages,
        rows,
        timings: Timings { total_s: t_total.elapsed().as_secs_f64(), ..Default::default() },
        outputs: vec![
            "summary.json".to_owned(),
            "simtable.csv".to_owned(),
            "replicates.csv".to_owned(),
        ],
    };
    write_json(&study.out_dir.join("summary.json"), &summary)?;
    Ok(SimRun { summary, out_dir: study.out_dir.clone() })
}
