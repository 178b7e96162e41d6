//! Command-line front end: configuration parsing, CSV ingestion, the
//! fit / simulation / quantile drivers, and the baseline criteria they
//! compare against. The binary maps results onto exit codes: 0 clean,
//! 2 finished with convergence warnings, 1 errors.

pub mod artifacts;
pub mod comparators;
pub mod config;
pub mod ingest;
pub mod runfit;
pub mod runquantile;
pub mod runsim;

use std::path::PathBuf;

use thiserror::Error;

pub use artifacts::{FitSummary, QuantileSummary, SimRow, SimSummary};
pub use comparators::{gcv_value, optimize_gcv, optimize_reml, reml_gaussian, ComparatorError};
pub use config::{ConfigError, QuantileConfig, RunConfig, SimRecipe};
pub use ingest::{read_csv, write_csv, IngestError};
pub use runfit::{run_fit, FitRun};
pub use runquantile::{run_quantile, QuantileRun};
pub use runsim::{run_sim, SimRun};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Artifact(#[from] artifacts::ArtifactError),
    #[error(transparent)]
    Data(#[from] ncv_core::DataError),
    #[error(transparent)]
    Model(#[from] ncv_core::ModelError),
    #[error(transparent)]
    Fit(#[from] ncv_core::FitError),
    #[error(transparent)]
    Scheme(#[from] ncv_core::SchemeError),
    #[error(transparent)]
    Ncv(#[from] ncv_core::NcvError),
    #[error(transparent)]
    Uq(#[from] ncv_core::UqError),
    #[error(transparent)]
    Quantile(#[from] ncv_core::QuantileError),
    #[error(transparent)]
    Comparator(#[from] comparators::ComparatorError),
    #[error("cannot write to {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("simulation aborted: {failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },
}
