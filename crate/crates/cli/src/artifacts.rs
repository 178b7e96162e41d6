//! Output artifacts: the JSON summary documents, coefficient /
//! covariance / band CSVs, and the outer-iteration trace. The summary
//! structs double as the schema: round-tripping a summary back through
//! them (unknown fields rejected) is the validation the tests run.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ncv_core::{BandTable, ModelSpec, OuterState};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("cannot serialize {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterSummary {
    pub status: String,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerSummary {
    pub converged: bool,
    pub iters: usize,
    pub hessian_repaired: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqFlags {
    pub kind: String,
    pub scaled_by_edf: bool,
    pub psd_clipped: bool,
    pub rescale_skipped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermEdf {
    pub label: String,
    pub edf: f64,
}

/// Wall-clock phases in seconds. The only nondeterministic part of a
/// summary; determinism tests compare summaries with this field removed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timings {
    pub read_s: f64,
    pub fit_s: f64,
    pub uq_s: f64,
    pub write_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSummary {
    pub schema_version: u32,
    pub command: String,
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub family: String,
    pub scheme: String,
    pub variant: String,
    pub uq: String,
    pub seed: u64,
    /// Criterion value at the selected smoothing parameters.
    pub value: f64,
    pub rho: Vec<f64>,
    pub lambda: Vec<f64>,
    pub edf: f64,
    pub edf_by_term: Vec<TermEdf>,
    pub n_indefinite: usize,
    pub n_singular: usize,
    pub nu_hat: Option<f64>,
    pub outer: OuterSummary,
    pub inner: InnerSummary,
    pub uq_flags: Option<UqFlags>,
    pub warnings: Vec<String>,
    pub timings: Timings,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimRow {
    pub method: String,
    /// Mean across replicates of the across-function coverage of the
    /// nominal 95% band.
    pub coverage: f64,
    /// Mean across replicates of the mean squared error of the fitted
    /// signal.
    pub mse: f64,
    /// Mean fraction of responses above the fitted curve (quantile
    /// recipes only).
    pub exceedance: Option<f64>,
    pub failures: usize,
    pub replicates: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSummary {
    pub schema_version: u32,
    pub command: String,
    pub kind: String,
    pub family: String,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub scheme: String,
    /// Ratio of signal standard deviation to residual standard
    /// deviation, averaged over replicates (informational).
    pub signal_to_noise: Option<f64>,
    pub failures: usize,
    /// First few per-replicate failure messages, for diagnosis.
    pub failure_messages: Vec<String>,
    pub rows: Vec<SimRow>,
    pub timings: Timings,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileSummary {
    pub schema_version: u32,
    pub command: String,
    pub n: usize,
    pub tau: f64,
    pub seed: u64,
    /// Pilot degrees of freedom and the bootstrap size they imply.
    pub k_edf: f64,
    pub boot_size: usize,
    pub n_boot: usize,
    pub lambda_grid: Vec<f64>,
    /// Bootstrap MSE per candidate; `null` marks candidates whose every
    /// solve diverged.
    pub mse: Vec<Option<f64>>,
    pub lambda_star: f64,
    pub dropped_solves: usize,
    pub value: f64,
    pub rho: Vec<f64>,
    pub lambda: Vec<f64>,
    pub edf: f64,
    pub proportion_below: f64,
    pub nu_hat: Option<f64>,
    pub outer: OuterSummary,
    pub warnings: Vec<String>,
    pub timings: Timings,
    pub outputs: Vec<String>,
}

pub fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<(), ArtifactError> {
    let mut text = serde_json::to_string_pretty(doc)
        .map_err(|source| ArtifactError::Json { path: path.to_owned(), source })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| ArtifactError::Io { path: path.to_owned(), source })
}

pub fn write_trace(path: &Path, trace: &[OuterState]) -> Result<(), ArtifactError> {
    let mut text = String::new();
    for state in trace {
        let line = serde_json::json!({
            "iter": state.iter,
            "rho": state.rho,
            "value": state.value,
            "grad": state.grad,
            "frozen": state.frozen,
            "step_scale": state.step_scale,
        });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| ArtifactError::Io { path: path.to_owned(), source })
}

/// One name per design column: `label[i]` within each block, prefixed
/// with the predictor for multi-predictor models.
pub fn coef_names(spec: &ModelSpec) -> Vec<String> {
    let mut names = vec![String::new(); spec.p];
    for block in &spec.blocks {
        for (i, col) in block.cols.clone().enumerate() {
            let base = if block.dim() == 1 {
                block.label.clone()
            } else {
                format!("{}[{}]", block.label, i)
            };
            names[col] =
                if spec.k > 1 { format!("p{}:{}", block.predictor, base) } else { base };
        }
    }
    names
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, ArtifactError> {
    csv::Writer::from_path(path).map_err(|source| ArtifactError::Csv { path: path.to_owned(), source })
}

pub fn write_coefficients(
    path: &Path,
    names: &[String],
    beta: &Array1<f64>,
    se: Option<&Array1<f64>>,
) -> Result<(), ArtifactError> {
    let mut w = csv_writer(path)?;
    let wrap = |source| ArtifactError::Csv { path: path.to_owned(), source };
    w.write_record(["coef", "estimate", "se"]).map_err(wrap)?;
    for (j, name) in names.iter().enumerate() {
        let se_cell = se.map_or(String::new(), |s| s[j].to_string());
        w.write_record([name.as_str(), &beta[j].to_string(), &se_cell]).map_err(wrap)?;
    }
    w.flush().map_err(|source| ArtifactError::Io { path: path.to_owned(), source })
}

pub fn write_covariance(
    path: &Path,
    names: &[String],
    v: &Array2<f64>,
) -> Result<(), ArtifactError> {
    let mut w = csv_writer(path)?;
    let wrap = |source| ArtifactError::Csv { path: path.to_owned(), source };
    let mut header = vec!["coef".to_owned()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(wrap)?;
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(v.row(i).iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|source| ArtifactError::Io { path: path.to_owned(), source })
}

/// Per-datum band rows, one per (row, predictor).
pub fn write_bands(path: &Path, bands: &[(usize, BandTable)]) -> Result<(), ArtifactError> {
    let mut w = csv_writer(path)?;
    let wrap = |source| ArtifactError::Csv { path: path.to_owned(), source };
    w.write_record(["row", "predictor", "fit", "se", "lo", "hi"]).map_err(wrap)?;
    for (pred, table) in bands {
        for i in 0..table.fit.len() {
            w.write_record([
                i.to_string(),
                pred.to_string(),
                table.fit[i].to_string(),
                table.se[i].to_string(),
                table.lo[i].to_string(),
                table.hi[i].to_string(),
            ])
            .map_err(wrap)?;
        }
    }
    w.flush().map_err(|source| ArtifactError::Io { path: path.to_owned(), source })
}

pub fn write_simtable(path: &Path, rows: &[SimRow]) -> Result<(), ArtifactError> {
    let mut w = csv_writer(path)?;
    let wrap = |source| ArtifactError::Csv { path: path.to_owned(), source };
    w.write_record(["method", "coverage", "mse", "exceedance", "failures", "replicates"])
        .map_err(wrap)?;
    for row in rows {
        w.write_record([
            row.method.clone(),
            row.coverage.to_string(),
            row.mse.to_string(),
            row.exceedance.map_or(String::new(), |e| e.to_string()),
            row.failures.to_string(),
            row.replicates.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|source| ArtifactError::Io { path: path.to_owned(), source })
}

/// Raw per-replicate records behind a simulation table.
#[derive(Debug, Clone)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub method: String,
    pub coverage: f64,
    pub mse: f64,
    pub exceedance: Option<f64>,
    pub edf: f64,
    pub value: f64,
    pub rho: Vec<f64>,
}

pub fn write_replicates(path: &Path, rows: &[ReplicateRow]) -> Result<(), ArtifactError> {
    let mut w = csv_writer(path)?;
    let wrap = |source| ArtifactError::Csv { path: path.to_owned(), source };
    w.write_record(["replicate", "method", "coverage", "mse", "exceedance", "edf", "value", "rho"])
        .map_err(wrap)?;
    for row in rows {
        let rho = row.rho.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ");
        w.write_record([
            row.replicate.to_string(),
            row.method.clone(),
            row.coverage.to_string(),
            row.mse.to_string(),
            row.exceedance.map_or(String::new(), |e| e.to_string()),
            row.edf.to_string(),
            row.value.to_string(),
            rho,
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|source| ArtifactError::Io { path: path.to_owned(), source })
}

pub fn outer_summary(outer: &ncv_core::OuterResult) -> OuterSummary {
    OuterSummary {
        status: format!("{:?}", outer.status),
        converged: matches!(outer.status, ncv_core::OuterStatus::Converged),
        iterations: outer.trace.last().map_or(0, |s| s.iter),
        evaluations: outer.evaluations,
    }
}
