//! Neighbourhood cross validation for quadratically penalized regression.
//!
//! The crate fits models of the form
//!
//! ```text
//!   minimize  sum_i D(y_i, eta_i)  +  sum_j lambda_j beta' S_j beta
//! ```
//!
//! where each datum's loss depends on one or more linear predictors
//! `eta_i[k] = X[i, J_k] . beta[J_k]`, and chooses the smoothing parameters
//! `lambda_j` by minimizing a cross-validation criterion in which whole
//! neighbourhoods of points are dropped per fold. Fold refits are
//! approximated by one Newton step computed through rank-one Cholesky
//! updates of the penalized Hessian, so the criterion and its exact
//! derivatives cost a few triangular solves per fold instead of a refit.
//!
//! Module map:
//! - [`linalg`]: dense Cholesky, rank-one update/downdate, deferred low-rank corrections.
//! - [`data`]: small column table that model building consumes.
//! - [`model`]: spline/tensor/linear/factor design blocks and difference penalties.
//! - [`loss`]: loss families and their derivatives in the linear predictors.
//! - [`fit`]: full-data penalized Newton fit plus smoothing-parameter sensitivities.
//! - [`scheme`]: fold construction (leave-one-out, k-fold, index-rule neighbourhoods).
//! - [`ncv`]: the criterion, its robust/quadratic variants, and its gradient.
//! - [`optimize`]: boxed BFGS outer loop with component freezing.
//! - [`uq`]: jackknife and dependence-robust covariances, bias correction, bands.
//! - [`quantile`]: pilot/select/fit pipeline for smooth additive quantile regression.
//! - [`synth`]: deterministic synthetic data generators used by tests and benches.
//! - [`check`]: randomized self-verification suites against independent oracles.

pub mod check;
pub mod data;
pub mod fit;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod ncv;
pub mod optimize;
pub mod quantile;
pub mod scheme;
pub mod synth;
pub mod uq;

pub use check::{linalg_suites, loss_suites, SuiteReport};
pub use data::{quantile_type7, Column, DataError, DataTable};
pub use fit::{fit_inner, FitError, FitOptions, FittedModel, Problem};
pub use linalg::{CholeskyFactor, DowndateLedger, LinalgError};
pub use loss::{FamilyInstance, FamilyKind, LossEval, MAX_K};
pub use model::{
    build_design, build_penalties, difference_penalty, predict_linear, BasisBlock, BlockKind,
    ModelError, ModelSpec, PenaltyMatrix, TermDef,
};
pub use ncv::{ncv_criterion, FoldStep, NcvError, NcvOptions, NcvResult, Variant};
pub use optimize::{
    optimize_ncv, optimize_with, NcvOptimum, OptimizeOptions, OuterEval, OuterResult, OuterState,
    OuterStatus,
};
pub use quantile::{
    boot_size, elf_location, fit_quantile, pilot_fit, quantile_pipeline, select_elf_lambda,
    select_elf_lambda_grid, ElfSelection, PilotFit, QuantileError, QuantileFit,
};
pub use scheme::{make_scheme, NeighbourhoodScheme, Rule, SchemeError, SchemeKind};
pub use synth::{
    replicate_rng, sim_curve, sim_quantile, sim_spatial, test_curve, CorrKind, RespKind, SimData,
    GAMMA_PHI,
};
pub use uq::{
    autocorr_cov, bayes_bias_correct, bayes_cov, frequentist_matrix, jackknife_cov,
    pointwise_bands, AutocorrOptions, BandTable, CovKind, CovarianceEstimate, UqError, Z_975,
};
