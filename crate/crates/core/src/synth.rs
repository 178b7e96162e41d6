//! Synthetic-data generators for the simulation harness.
//!
//! One-dimensional curve data with AR(1) or moving-average residual
//! correlation, spatial grid data with a weighted moving-average error
//! field, and a heteroscedastic quantile-regression benchmark. Every
//! generator takes an explicit RNG; replicate streams are derived from a
//! master seed so tables reproduce across platforms and thread counts.

use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, StandardNormal};
use statrs::distribution::ContinuousCDF;

use crate::data::DataTable;

/// Residual correlation structure for the curve generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrKind {
    /// Independent standard normal errors.
    White,
    /// `e_{i+1} = 0.6 e_i + eps_i`, stationary start.
    Ar1,
    /// `e_i = sum_{j=i-2}^{i+2} eps_j`, scaled to unit variance.
    Ma,
}

/// Response distribution built on top of the latent Gaussian field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RespKind {
    Gaussian,
    Poisson,
    /// Gamma with dispersion 0.1 (shape 10).
    Gamma,
}

/// One simulated data set plus the curve the model is judged against
/// (on the linear-predictor scale).
#[derive(Debug, Clone)]
pub struct SimData {
    pub table: DataTable,
    pub truth: Array1<f64>,
}

const AR1_COEF: f64 = 0.6;
const MA_HALFWIDTH: usize = 2;
/// Dispersion of the gamma responses (shape 10); fits should match it.
pub const GAMMA_PHI: f64 = 0.1;

/// RNG for replicate `rep` of a run seeded by `master`.
pub fn replicate_rng(master: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(rep);
    rng
}

/// Test curve `2.5 sin(4 pi x) exp(-2x)`.
pub fn test_curve(x: f64) -> f64 {
    2.5 * (4.0 * std::f64::consts::PI * x).sin() * (-2.0 * x).exp()
}

/// Correlated errors plus their marginal variance.
fn correlated_errors(rng: &mut ChaCha8Rng, n: usize, corr: CorrKind) -> (Vec<f64>, f64) {
    match corr {
        CorrKind::White => ((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(), 1.0),
        CorrKind::Ar1 => {
            let var = 1.0 / (1.0 - AR1_COEF * AR1_COEF);
            let mut e = Vec::with_capacity(n);
            let mut prev = rng.sample::<f64, _>(StandardNormal) * var.sqrt();
            for _ in 0..n {
                e.push(prev);
                prev = AR1_COEF * prev + rng.sample::<f64, _>(StandardNormal);
            }
            (e, var)
        }
        CorrKind::Ma => {
            let w = 2 * MA_HALFWIDTH + 1;
            let scale = 1.0 / (w as f64).sqrt();
            let eps: Vec<f64> = (0..n + w - 1).map(|_| rng.sample(StandardNormal)).collect();
            let e = (0..n).map(|i| eps[i..i + w].iter().sum::<f64>() * scale).collect();
            (e, 1.0)
        }
    }
}

/// Draws the response given the latent mean field `f + e` and the
/// correction `sigma2` = var(e) that keeps the log-scale mean at `f`.
fn draw_response(rng: &mut ChaCha8Rng, f: &[f64], e: &[f64], sigma2: f64, resp: RespKind) -> Vec<f64> {
    match resp {
        RespKind::Gaussian => f.iter().zip(e).map(|(fi, ei)| fi + ei).collect(),
        RespKind::Poisson => f
            .iter()
            .zip(e)
            .map(|(fi, ei)| {
                let mu = (fi + ei - sigma2 / 2.0).exp();
                Poisson::new(mu.max(1e-12)).unwrap().sample(rng)
            })
            .collect(),
        RespKind::Gamma => f
            .iter()
            .zip(e)
            .map(|(fi, ei)| {
                let mu = (fi + ei - sigma2 / 2.0).exp();
                Gamma::new(1.0 / GAMMA_PHI, mu * GAMMA_PHI).unwrap().sample(rng)
            })
            .collect(),
    }
}

/// Curve benchmark: `n` equally spaced x over [0,1], test-curve signal,
/// correlated errors, chosen response family. The reported truth is the
/// signal on the linear-predictor scale.
pub fn sim_curve(rng: &mut ChaCha8Rng, n: usize, corr: CorrKind, resp: RespKind) -> SimData {
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let f: Vec<f64> = xs.iter().map(|&x| test_curve(x)).collect();
    let (e, sigma2) = correlated_errors(rng, n, corr);
    let ys = draw_response(rng, &f, &e, sigma2, resp);
    let mut table = DataTable::new();
    table.push_numeric("x", xs).unwrap();
    table.push_numeric("y", ys).unwrap();
    SimData { table, truth: Array1::from(f) }
}

/// Spatial benchmark on a g-by-g grid with integer coordinates. The
/// signal is a sum of two Gaussian bumps rescaled to standard deviation
/// 0.35; errors are a weighted average of each point's own deviate
/// (weight 1), its 4 nearest neighbours (0.5) and 4 diagonal neighbours
/// (0.3), normalized by the total weight 4.2, with the deviate grid
/// extended past the edges.
pub fn sim_spatial(rng: &mut ChaCha8Rng, g: usize, resp: RespKind) -> SimData {
    let n = g * g;
    let denom = (g - 1) as f64;
    let mut xs = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    let mut f = Vec::with_capacity(n);
    for i in 0..g {
        for j in 0..g {
            let (u, v) = (i as f64 / denom, j as f64 / denom);
            xs.push(i as f64);
            zs.push(j as f64);
            let b1 = (-((u - 0.3).powi(2) + (v - 0.3).powi(2)) / (2.0 * 0.15 * 0.15)).exp();
            let b2 = 0.8 * (-((u - 0.75).powi(2) + (v - 0.7).powi(2)) / (2.0 * 0.12 * 0.12)).exp();
            f.push(b1 + b2);
        }
    }
    let mean = f.iter().sum::<f64>() / n as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    for v in f.iter_mut() {
        *v *= 0.35 / sd;
    }

    // deviates on the extended grid, then the weighted average
    let ge = g + 2;
    let eps: Vec<f64> = (0..ge * ge).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let at = |i: usize, j: usize| eps[i * ge + j];
    let mut e = Vec::with_capacity(n);
    for i in 0..g {
        for j in 0..g {
            let (ci, cj) = (i + 1, j + 1);
            let near =
                at(ci - 1, cj) + at(ci + 1, cj) + at(ci, cj - 1) + at(ci, cj + 1);
            let diag = at(ci - 1, cj - 1)
                + at(ci - 1, cj + 1)
                + at(ci + 1, cj - 1)
                + at(ci + 1, cj + 1);
            e.push((at(ci, cj) + 0.5 * near + 0.3 * diag) / 4.2);
        }
    }
    let sigma2 = (1.0 + 4.0 * 0.25 + 4.0 * 0.09) / (4.2 * 4.2);
    let ys = draw_response(rng, &f, &e, sigma2, resp);
    let mut table = DataTable::new();
    table.push_numeric("x", xs).unwrap();
    table.push_numeric("z", zs).unwrap();
    table.push_numeric("y", ys).unwrap();
    SimData { table, truth: Array1::from(f) }
}

/// Heteroscedastic quantile benchmark: x equally spaced over [-4,3],
/// `y ~ N(1 + x + x^2, (1.2 + sin 2x)^2)`. The truth is the tau
/// quantile curve.
pub fn sim_quantile(rng: &mut ChaCha8Rng, n: usize, tau: f64) -> SimData {
    let z_tau = statrs::distribution::Normal::new(0.0, 1.0).unwrap().inverse_cdf(tau);
    let xs: Vec<f64> = (0..n).map(|i| -4.0 + 7.0 * i as f64 / (n - 1) as f64).collect();
    let mut ys = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for &x in &xs {
        let mu = 1.0 + x + x * x;
        let sd = 1.2 + (2.0 * x).sin();
        ys.push(Normal::new(mu, sd).unwrap().sample(rng));
        truth.push(mu + z_tau * sd);
    }
    let mut table = DataTable::new();
    table.push_numeric("x", xs).unwrap();
    table.push_numeric("y", ys).unwrap();
    SimData { table, truth: Array1::from(truth) }
}
