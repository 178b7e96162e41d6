//! Run configuration: strict TOML files plus the small formula, family,
//! scheme, and variant grammars they embed. Unknown keys are rejected so
//! typos surface as parse errors instead of silently falling back to
//! defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use ncv_core::{FamilyInstance, FitOptions, OptimizeOptions, Rule, SchemeKind, TermDef, Variant};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}:\n{message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
    // toml errors carry line/column spans in their message
    toml::from_str(&text)
        .map_err(|e| ConfigError::Parse { path: path.to_owned(), message: e.to_string() })
}

/// Outer/inner optimizer settings; every field falls back to the library
/// default when absent.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iter: Option<usize>,
    pub grad_tol: Option<f64>,
    pub rho_min: Option<f64>,
    pub rho_max: Option<f64>,
    pub inner_max_iter: Option<usize>,
    pub inner_tol: Option<f64>,
}

impl OptimizerConfig {
    pub fn to_options(&self) -> OptimizeOptions {
        let mut opts = OptimizeOptions::default();
        let mut fit = FitOptions::default();
        if let Some(v) = self.max_iter {
            opts.max_iter = v;
        }
        if let Some(v) = self.grad_tol {
            opts.grad_tol = v;
        }
        if let Some(v) = self.rho_min {
            opts.rho_min = v;
        }
        if let Some(v) = self.rho_max {
            opts.rho_max = v;
        }
        if let Some(v) = self.inner_max_iter {
            fit.max_iter = v;
        }
        if let Some(v) = self.inner_tol {
            fit.tol = v;
        }
        opts.fit = fit;
        opts
    }
}

/// One model fit: data, formula, family, scheme, criterion variant,
/// covariance regime, seed, and output directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    pub response: String,
    /// One formula string per linear predictor, e.g.
    /// `["s(x, k=10) + lin(t)"]`.
    pub formula: Vec<String>,
    #[serde(default = "default_family")]
    pub family: String,
    /// Gamma dispersion (families that use it).
    pub phi: Option<f64>,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_variant")]
    pub variant: String,
    /// Variant parameter for `quadratic`, `robust`, `perturbed`.
    pub gamma: Option<f64>,
    #[serde(default = "default_uq")]
    pub uq: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Starting log smoothing parameters (zeros when absent).
    pub rho0: Option<Vec<f64>>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_family() -> String {
    "gaussian".into()
}

fn default_scheme() -> String {
    "loo".into()
}

fn default_variant() -> String {
    "plain".into()
}

fn default_uq() -> String {
    "corrected".into()
}

fn default_out_dir() -> PathBuf {
    "ncv-out".into()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let mut cfg: RunConfig = load_toml(path)?;
        cfg.data = resolve_data_path(path, cfg.data);
        Ok(cfg)
    }
}

/// A relative `data` path counts from the config file's directory, so a
/// config can ship next to its data and run from anywhere.
fn resolve_data_path(config: &Path, data: PathBuf) -> PathBuf {
    if data.is_absolute() {
        return data;
    }
    match config.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(data),
        _ => data,
    }
}

/// Simulation study: generator kind, sizes, replicate count, seed.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimRecipe {
    /// `ar1_1d`, `ma_1d`, `spatial_ma`, or `quantile_sim`.
    pub kind: String,
    /// Series length for the 1-d kinds (default 1000).
    pub n: Option<usize>,
    /// Grid side for `spatial_ma` (default 18).
    pub grid: Option<usize>,
    /// Response family for the curve kinds: `gaussian`, `poisson`, `gamma`.
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Spline basis dimension (per margin for `spatial_ma`).
    pub k: Option<usize>,
    /// Neighbourhood rule for the NCV fit (defaults: `window:4` for the
    /// 1-d kinds, `square:2:x:z` for `spatial_ma`).
    pub scheme: Option<String>,
    /// Quantile level for `quantile_sim` (default 0.95).
    pub tau: Option<f64>,
    /// Bootstrap resamples for `quantile_sim` smoothing selection
    /// (default 100).
    pub n_boot: Option<usize>,
    #[serde(default = "default_sim_seed")]
    pub seed: u64,
    #[serde(default = "default_sim_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_replicates() -> usize {
    100
}

fn default_sim_seed() -> u64 {
    1
}

fn default_sim_out_dir() -> PathBuf {
    "ncv-sim".into()
}

impl SimRecipe {
    pub fn load(path: &Path) -> Result<SimRecipe, ConfigError> {
        load_toml(path)
    }
}

/// Quantile pipeline run: pilot mean/variance formulas, quantile
/// formula, level, selection grid, bootstrap size.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileConfig {
    pub data: PathBuf,
    pub response: String,
    pub mean_formula: Vec<String>,
    pub var_formula: Vec<String>,
    pub q_formula: Vec<String>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Number of log-spaced smoothing candidates.
    #[serde(default = "default_grid_len")]
    pub grid: usize,
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_q_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_tau() -> f64 {
    0.5
}

fn default_grid_len() -> usize {
    15
}

fn default_n_boot() -> usize {
    100
}

fn default_q_out_dir() -> PathBuf {
    "ncv-quantile".into()
}

impl QuantileConfig {
    pub fn load(path: &Path) -> Result<QuantileConfig, ConfigError> {
        let mut cfg: QuantileConfig = load_toml(path)?;
        cfg.data = resolve_data_path(path, cfg.data);
        Ok(cfg)
    }
}

/// Parses one formula string per linear predictor. Terms are joined by
/// `+`; an empty string gives an intercept-only predictor.
pub fn parse_formulas(formulas: &[String]) -> Result<Vec<Vec<TermDef>>, ConfigError> {
    if formulas.is_empty() {
        return Err(ConfigError::Invalid("at least one predictor formula required".into()));
    }
    formulas.iter().map(|f| parse_formula(f)).collect()
}

fn parse_formula(formula: &str) -> Result<Vec<TermDef>, ConfigError> {
    let trimmed = formula.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed.split('+').map(|t| parse_term(t.trim())).collect()
}

/// `s(x, k=10, m=2)`, `te(x, z, k=5, k2=5, m=2)`, `lin(x)`, `fac(g)`.
fn parse_term(term: &str) -> Result<TermDef, ConfigError> {
    let bad = |msg: &str| ConfigError::Invalid(format!("term {term:?}: {msg}"));
    let open = term.find('(').ok_or_else(|| bad("expected name(args)"))?;
    if !term.ends_with(')') {
        return Err(bad("expected name(args)"));
    }
    let name = &term[..open];
    let args: Vec<&str> = term[open + 1..term.len() - 1]
        .split(',')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .collect();
    let mut vars = Vec::new();
    let mut k = None;
    let mut k2 = None;
    let mut m = None;
    for arg in &args {
        match arg.split_once('=') {
            Some((key, value)) => {
                let value: usize = value
                    .trim()
                    .parse()
                    .map_err(|_| bad(&format!("{key} must be a positive integer")))?;
                match key.trim() {
                    "k" => k = Some(value),
                    "k2" => k2 = Some(value),
                    "m" => m = Some(value),
                    other => return Err(bad(&format!("unknown option {other:?}"))),
                }
            }
            None => vars.push((*arg).to_owned()),
        }
    }
    match (name, vars.as_slice()) {
        ("s", [var]) => Ok(TermDef::Spline {
            var: var.clone(),
            k: k.unwrap_or(10),
            m: m.unwrap_or(2),
        }),
        ("te", [v1, v2]) => Ok(TermDef::Tensor {
            vars: [v1.clone(), v2.clone()],
            k: [k.unwrap_or(5), k2.or(k).unwrap_or(5)],
            m: m.unwrap_or(2),
        }),
        ("lin", [var]) => Ok(TermDef::Linear { var: var.clone() }),
        ("fac", [var]) => Ok(TermDef::Factor { var: var.clone() }),
        ("s" | "te" | "lin" | "fac", _) => Err(bad("wrong number of variables")),
        _ => Err(bad("expected s(...), te(...), lin(...) or fac(...)")),
    }
}

/// `loo`, `kfold:K`, or a neighbourhood rule string such as `window:4`
/// or `square:2:x:z` (see the scheme rule grammar).
pub fn parse_scheme(text: &str) -> Result<SchemeKind, ConfigError> {
    let t = text.trim();
    if t == "loo" {
        return Ok(SchemeKind::Loo);
    }
    if let Some(k) = t.strip_prefix("kfold:") {
        let k = k
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("scheme {t:?}: fold count must be an integer")))?;
        return Ok(SchemeKind::KFold(k));
    }
    let rule = Rule::parse(t).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(SchemeKind::Neighbourhood(rule))
}

/// Family names exposed in configs. The smoothed quantile family is
/// only reachable through the `quantile` subcommand, which constructs
/// its per-datum scales from the pilot fit.
pub fn parse_family(name: &str, phi: Option<f64>) -> Result<FamilyInstance, ConfigError> {
    match name {
        "gaussian" => Ok(FamilyInstance::gaussian()),
        "poisson" | "poisson_log" => Ok(FamilyInstance::poisson_log()),
        "poisson_identity" => Ok(FamilyInstance::poisson_identity()),
        "gamma" | "gamma_log" => {
            let phi = phi.unwrap_or(1.0);
            if !(phi > 0.0) {
                return Err(ConfigError::Invalid(format!("phi must be positive, got {phi}")));
            }
            Ok(FamilyInstance::gamma_log(phi))
        }
        "gaulss" => Ok(FamilyInstance::gaulss()),
        "elf" => Err(ConfigError::Invalid(
            "the smoothed quantile family is driven by the `quantile` subcommand".into(),
        )),
        other => Err(ConfigError::Invalid(format!("unknown family {other:?}"))),
    }
}

pub fn parse_variant(name: &str, gamma: Option<f64>) -> Result<Variant, ConfigError> {
    let gamma = gamma.unwrap_or(1.0);
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(ConfigError::Invalid(format!("gamma must be positive, got {gamma}")));
    }
    match name {
        "plain" => Ok(Variant::Plain),
        "quadratic" => Ok(Variant::Quadratic { gamma }),
        "robust" => Ok(Variant::Robust { gamma }),
        "perturbed" => Ok(Variant::Perturbed { gamma }),
        other => Err(ConfigError::Invalid(format!("unknown variant {other:?}"))),
    }
}

/// Covariance regime requested for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UqRegime {
    None,
    Jackknife,
    Robust,
    Bayes,
    Corrected,
}

pub fn parse_uq(name: &str) -> Result<UqRegime, ConfigError> {
    match name {
        "none" => Ok(UqRegime::None),
        "jackknife" => Ok(UqRegime::Jackknife),
        "robust" => Ok(UqRegime::Robust),
        "bayes" => Ok(UqRegime::Bayes),
        "corrected" => Ok(UqRegime::Corrected),
        other => Err(ConfigError::Invalid(format!("unknown uq regime {other:?}"))),
    }
}
