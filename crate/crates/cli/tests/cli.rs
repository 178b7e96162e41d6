//! End-to-end checks of the command line drivers: artifact schemas,
//! determinism, exit codes, and the closed-form identity the fitted
//! criterion value must satisfy on Gaussian leave-one-out runs.

use ncv_cli::config::RunConfig;
use ncv_cli::{
    read_csv, run_fit, run_quantile, run_sim, write_csv, FitSummary, QuantileConfig,
    QuantileSummary, SimRecipe, SimSummary,
};
use ncv_core::{
    build_design, fit_inner, replicate_rng, sim_curve, sim_quantile, CorrKind, FamilyInstance,
    FitOptions, ModelSpec, Problem, RespKind, TermDef,
};
use ndarray::Array1;
use std::path::{Path, PathBuf};
use std::process::Command;

fn ncv_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ncv"))
}

fn write_gaussian_csv(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut rng = replicate_rng(seed, 0);
    let sim = sim_curve(&mut rng, n, CorrKind::White, RespKind::Gaussian);
    let path = dir.join("data.csv");
    write_csv(&path, &sim.table).unwrap();
    path
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn bundled_example_writes_a_summary_matching_the_schema() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::load(Path::new("testdata/example_fit.toml")).unwrap();
    cfg.out_dir = out.path().to_owned();
    let run = run_fit(&cfg).unwrap();

    // every advertised artifact exists
    for name in &run.summary.outputs {
        assert!(out.path().join(name).is_file(), "missing artifact {name}");
    }

    // the JSON on disk deserializes against the strict schema and agrees
    // with the in-memory summary
    let text = std::fs::read_to_string(out.path().join("summary.json")).unwrap();
    let back: FitSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(back.schema_version, run.summary.schema_version);
    assert_eq!(back.n, 80);
    assert_eq!(back.family, "gaussian");
    assert_eq!(back.value, run.summary.value);
    assert_eq!(back.rho, run.summary.rho);
    assert!(back.edf > 1.0 && back.edf < 80.0);

    // coefficients.csv has one row per coefficient plus a header
    let coefs = std::fs::read_to_string(out.path().join("coefficients.csv")).unwrap();
    assert_eq!(coefs.lines().count(), back.p + 1);
}

#[test]
fn reruns_and_thread_counts_leave_the_artifacts_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_gaussian_csv(dir.path(), 100, 11);
    let cfg = write_config(
        dir.path(),
        "run.toml",
        &format!(
            r#"
data = "{}"
response = "y"
formula = ["s(x, k=10)"]
scheme = "window:3"
uq = "corrected"
seed = 3
"#,
            data.file_name().unwrap().to_str().unwrap()
        ),
    );

    let run = |label: &str, threads: &str| -> PathBuf {
        let out = dir.path().join(label);
        let status = ncv_bin()
            .args(["--threads", threads, "--out-dir"])
            .arg(&out)
            .arg("fit")
            .arg(&cfg)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        out
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "4");

    for name in [
        "coefficients.csv",
        "bands.csv",
        "covariance_autocorr_plus_bayes_bias.csv",
        "trace.jsonl",
    ] {
        let bytes_a = std::fs::read(a.join(name)).unwrap();
        assert_eq!(bytes_a, std::fs::read(b.join(name)).unwrap(), "{name} differs on rerun");
        assert_eq!(bytes_a, std::fs::read(c.join(name)).unwrap(), "{name} differs at 4 threads");
    }

    // summaries agree once the wall-clock block is dropped
    let strip = |p: &Path| -> serde_json::Value {
        let text = std::fs::read_to_string(p.join("summary.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("timings");
        v
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(strip(&a), strip(&c));
}

#[test]
fn gaussian_loo_value_matches_the_influence_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_gaussian_csv(dir.path(), 90, 23);
    let cfg = RunConfig::load(&write_config(
        dir.path(),
        "run.toml",
        r#"
data = "data.csv"
response = "y"
formula = ["s(x, k=12)"]
scheme = "loo"
uq = "none"
"#,
    ))
    .unwrap();
    let run = run_fit(&cfg).unwrap();

    // rebuild the problem and refit at the selected smoothing to get the
    // influence diagonal of the penalized projector
    let table = read_csv(&data).unwrap();
    let spec =
        ModelSpec::build(&[vec![TermDef::Spline { var: "x".into(), k: 12, m: 2 }]], &table)
            .unwrap();
    let x = build_design(&spec, &table).unwrap();
    let y = Array1::from(table.numeric("y").unwrap().to_vec());
    let problem = Problem::new(
        x,
        y,
        spec.pred_cols.clone(),
        spec.penalties().to_vec(),
        FamilyInstance::gaussian(),
    )
    .unwrap();
    let rho = Array1::from(run.summary.rho.clone());
    let fit = fit_inner(&problem, rho.view(), None, &FitOptions::default()).unwrap();

    let mut want = 0.0;
    for i in 0..problem.n() {
        let xi = problem.x.row(i);
        let a_ii = 2.0 * xi.dot(&fit.r0.solve(xi));
        let r = problem.y[i] - fit.eta[[i, 0]];
        want += (r / (1.0 - a_ii)).powi(2);
    }
    let rel = (run.summary.value - want).abs() / want.abs();
    assert!(rel < 1e-8, "V = {}, closed form = {}, rel = {rel:e}", run.summary.value, want);
}

#[test]
fn config_and_data_errors_exit_one_with_located_messages() {
    let dir = tempfile::tempdir().unwrap();

    // unknown key: the TOML span names the line
    let bad_cfg = write_config(
        dir.path(),
        "bad.toml",
        "data = \"d.csv\"\nresponse = \"y\"\nformula = [\"s(x)\"]\nscheem = \"loo\"\n",
    );
    let out = ncv_bin().arg("fit").arg(&bad_cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("line 4"), "stderr: {msg}");
    assert!(msg.contains("scheem"), "stderr: {msg}");

    // empty CSV field: the error names file, line and column
    let data = dir.path().join("d.csv");
    std::fs::write(&data, "x,y\n0.1,2\n0.2,\n").unwrap();
    let cfg = write_config(
        dir.path(),
        "run.toml",
        "data = \"d.csv\"\nresponse = \"y\"\nformula = [\"s(x, k=5)\"]\n",
    );
    let out = ncv_bin().arg("fit").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("line 3"), "stderr: {msg}");
    assert!(msg.contains("\"y\""), "stderr: {msg}");

    // missing response column
    let cfg = write_config(
        dir.path(),
        "run2.toml",
        "data = \"ok.csv\"\nresponse = \"z\"\nformula = [\"s(x, k=5)\"]\n",
    );
    std::fs::write(dir.path().join("ok.csv"), "x,y\n0.1,2\n0.2,3\n0.3,4\n").unwrap();
    let out = ncv_bin().arg("fit").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains('z'), "stderr: {msg}");
}

#[test]
fn iteration_capped_runs_exit_with_the_warning_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_gaussian_csv(dir.path(), 100, 31);
    let cfg = write_config(
        dir.path(),
        "run.toml",
        &format!(
            r#"
data = "{}"
response = "y"
formula = ["s(x, k=10)"]
uq = "none"

[optimizer]
max_iter = 1
grad_tol = 1e-12
"#,
            data.file_name().unwrap().to_str().unwrap()
        ),
    );
    let out = ncv_bin()
        .arg("--out-dir")
        .arg(dir.path().join("out"))
        .arg("fit")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn small_simulation_studies_write_deterministic_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimRecipe {
        kind: "ma_1d".into(),
        n: Some(80),
        grid: None,
        family: "gaussian".into(),
        replicates: 3,
        k: Some(8),
        scheme: None,
        tau: None,
        n_boot: None,
        seed: 5,
        out_dir: dir.path().join("s1"),
        optimizer: Default::default(),
    };
    let run = run_sim(&cfg).unwrap();
    let methods: Vec<&str> = run.summary.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["ncv", "ncv_loo", "gcv", "reml"]);
    assert_eq!(run.summary.failures, 0);
    for row in &run.summary.rows {
        assert!(row.coverage >= 0.0 && row.coverage <= 1.0);
        assert!(row.mse.is_finite() && row.mse >= 0.0);
        assert_eq!(row.replicates, 3);
    }

    let text = std::fs::read_to_string(dir.path().join("s1/summary.json")).unwrap();
    let back: SimSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(back.rows.len(), run.summary.rows.len());

    let cfg2 = SimRecipe { out_dir: dir.path().join("s2"), ..cfg };
    run_sim(&cfg2).unwrap();
    for name in ["simtable.csv", "replicates.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("s1").join(name)).unwrap(),
            std::fs::read(dir.path().join("s2").join(name)).unwrap(),
            "{name} differs between identically seeded studies"
        );
    }
}

#[test]
fn quantile_driver_round_trips_its_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = replicate_rng(9, 0);
    let sim = sim_quantile(&mut rng, 120, 0.8);
    let data = dir.path().join("q.csv");
    write_csv(&data, &sim.table).unwrap();

    let cfg = QuantileConfig {
        data,
        response: "y".into(),
        mean_formula: vec!["s(x, k=8)".into()],
        var_formula: vec!["s(x, k=8)".into()],
        q_formula: vec!["s(x, k=8)".into()],
        tau: 0.8,
        grid: 4,
        n_boot: 50,
        seed: 1,
        out_dir: dir.path().join("q-out"),
        optimizer: Default::default(),
    };
    let run = run_quantile(&cfg).unwrap();
    let s = &run.summary;
    assert_eq!(s.lambda_grid.len(), 4);
    assert!(s.lambda_star > 0.0);
    assert!(s.proportion_below > 0.5 && s.proportion_below < 1.0);
    for name in &s.outputs {
        assert!(dir.path().join("q-out").join(name).is_file(), "missing artifact {name}");
    }
    let text = std::fs::read_to_string(dir.path().join("q-out/summary.json")).unwrap();
    let back: QuantileSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(back.tau, 0.8);
    assert_eq!(back.lambda_star, s.lambda_star);
}
