//! Per-datum loss families and their derivatives.
//!
//! Every family exposes the negative log likelihood (or deviance-style
//! loss) of one datum as a smooth function of `k` linear predictors,
//! together with derivative arrays up to third order. Mixed partials are
//! stored packed by index sum, exploiting symmetry: with `k <= 2`,
//! `d2[j + k]` holds the `(j, k)` second derivative and `d3[j + k + l]`
//! the `(j, k, l)` third derivative.
//!
//! All losses are written so that additive `y`-only terms that do not
//! affect minimization are kept only when cheap and finite; the gamma
//! family drops them entirely so that zero responses are admissible.

use statrs::function::gamma::ln_gamma;

/// Maximum number of linear predictors a family may use.
pub const MAX_K: usize = 2;

/// Value and packed derivatives of one datum's loss at a predictor value.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossEval {
    pub value: f64,
    pub d1: [f64; MAX_K],
    /// `d2[j + k]`, `j <= k`.
    pub d2: [f64; 3],
    /// `d3[j + k + l]`, `j <= k <= l`.
    pub d3: [f64; 4],
    /// False when the value or any requested derivative is nonfinite
    /// (e.g. a mean constraint is violated at the evaluation point).
    pub finite: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    /// Squared error `(y - eta)^2`.
    GaussianIdentity,
    /// Poisson negative log likelihood, log link.
    PoissonLog,
    /// Poisson negative log likelihood, identity link (`eta > 0`).
    PoissonIdentity,
    /// Gamma quasi-likelihood, log link, fixed dispersion; `y`-only
    /// terms dropped so `y = 0` is admissible.
    GammaLog,
    /// Gaussian with mean `eta_1` and standard deviation `exp(eta_2)`.
    GaussianLocScale,
    /// Smoothed pinball loss for quantile regression.
    Elf,
}

/// A loss family bound to its fixed shape parameters.
#[derive(Debug, Clone)]
pub struct FamilyInstance {
    pub kind: FamilyKind,
    /// Dispersion for `GammaLog` (loss is scaled by `1 / phi`).
    pub phi: f64,
    /// Target quantile level for `Elf`.
    pub tau: f64,
    /// Smoothing bandwidth multiplier for `Elf`.
    pub elf_lambda: f64,
    /// Per-datum scale for `Elf`; a single entry broadcasts.
    pub sigma: Vec<f64>,
}

impl FamilyInstance {
    pub fn gaussian() -> Self {
        Self::plain(FamilyKind::GaussianIdentity)
    }

    pub fn poisson_log() -> Self {
        Self::plain(FamilyKind::PoissonLog)
    }

    pub fn poisson_identity() -> Self {
        Self::plain(FamilyKind::PoissonIdentity)
    }

    pub fn gamma_log(phi: f64) -> Self {
        assert!(phi > 0.0, "gamma dispersion must be positive");
        FamilyInstance { phi, ..Self::plain(FamilyKind::GammaLog) }
    }

    pub fn gaulss() -> Self {
        Self::plain(FamilyKind::GaussianLocScale)
    }

    pub fn elf(tau: f64, lambda: f64, sigma: Vec<f64>) -> Self {
        assert!(tau > 0.0 && tau < 1.0, "quantile level must lie in (0, 1)");
        assert!(lambda > 0.0, "smoothing bandwidth must be positive");
        assert!(!sigma.is_empty() && sigma.iter().all(|s| *s > 0.0));
        FamilyInstance { tau, elf_lambda: lambda, sigma, ..Self::plain(FamilyKind::Elf) }
    }

    fn plain(kind: FamilyKind) -> Self {
        FamilyInstance { kind, phi: 1.0, tau: 0.5, elf_lambda: 1.0, sigma: vec![1.0] }
    }

    /// Number of linear predictors this family consumes.
    pub fn k(&self) -> usize {
        match self.kind {
            FamilyKind::GaussianLocScale => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            FamilyKind::GaussianIdentity => "gaussian",
            FamilyKind::PoissonLog => "poisson",
            FamilyKind::PoissonIdentity => "poisson-identity",
            FamilyKind::GammaLog => "gamma",
            FamilyKind::GaussianLocScale => "gaulss",
            FamilyKind::Elf => "elf",
        }
    }

    fn sigma_at(&self, i: usize) -> f64 {
        if self.sigma.len() == 1 {
            self.sigma[0]
        } else {
            self.sigma[i]
        }
    }

    /// Loss of datum `i` with response `y` at predictors `eta[..k]`,
    /// with derivatives filled up to `order` (0..=3).
    pub fn eval(&self, i: usize, y: f64, eta: &[f64], order: usize) -> LossEval {
        let mut out = LossEval { finite: true, ..LossEval::default() };
        match self.kind {
            FamilyKind::GaussianIdentity => {
                let r = y - eta[0];
                out.value = r * r;
                if order >= 1 {
                    out.d1[0] = -2.0 * r;
                }
                if order >= 2 {
                    out.d2[0] = 2.0;
                }
            }
            FamilyKind::PoissonLog => {
                let mu = eta[0].exp();
                out.value = mu - y * eta[0] + ln_gamma(y + 1.0);
                if order >= 1 {
                    out.d1[0] = mu - y;
                }
                if order >= 2 {
                    out.d2[0] = mu;
                }
                if order >= 3 {
                    out.d3[0] = mu;
                }
            }
            FamilyKind::PoissonIdentity => {
                let mu = eta[0];
                if mu <= 0.0 {
                    out.value = f64::INFINITY;
                    out.finite = false;
                    return out;
                }
                out.value = mu - y * mu.ln() + ln_gamma(y + 1.0);
                if order >= 1 {
                    out.d1[0] = 1.0 - y / mu;
                }
                if order >= 2 {
                    out.d2[0] = y / (mu * mu);
                }
                if order >= 3 {
                    out.d3[0] = -2.0 * y / (mu * mu * mu);
                }
            }
            FamilyKind::GammaLog => {
                let a = 1.0 / self.phi;
                let e = (-eta[0]).exp();
                out.value = a * (eta[0] + y * e);
                if order >= 1 {
                    out.d1[0] = a * (1.0 - y * e);
                }
                if order >= 2 {
                    out.d2[0] = a * y * e;
                }
                if order >= 3 {
                    out.d3[0] = -a * y * e;
                }
            }
            FamilyKind::GaussianLocScale => {
                let r = y - eta[0];
                let w = (-2.0 * eta[1]).exp();
                out.value = 0.5 * (2.0 * std::f64::consts::PI).ln() + eta[1] + 0.5 * r * r * w;
                if order >= 1 {
                    out.d1[0] = -r * w;
                    out.d1[1] = 1.0 - r * r * w;
                }
                if order >= 2 {
                    out.d2[0] = w;
                    out.d2[1] = 2.0 * r * w;
                    out.d2[2] = 2.0 * r * r * w;
                }
                if order >= 3 {
                    out.d3[0] = 0.0;
                    out.d3[1] = -2.0 * w;
                    out.d3[2] = -4.0 * r * w;
                    out.d3[3] = -4.0 * r * r * w;
                }
            }
            FamilyKind::Elf => {
                let sig = self.sigma_at(i);
                let lam = self.elf_lambda;
                let s = (y - eta[0]) / (lam * sig);
                // softplus(s) = max(s, 0) + ln(1 + exp(-|s|))
                let soft = s.max(0.0) + (-s.abs()).exp().ln_1p();
                out.value = (self.tau - 1.0) * (y - eta[0]) / sig + lam * soft;
                if order >= 1 {
                    let g = logistic(s);
                    out.d1[0] = (1.0 - self.tau) / sig - g / sig;
                    if order >= 2 {
                        let v = g * (1.0 - g);
                        out.d2[0] = v / (lam * sig * sig);
                        if order >= 3 {
                            out.d3[0] = -v * (1.0 - 2.0 * g) / (lam * lam * sig * sig * sig);
                        }
                    }
                }
            }
        }
        let k = self.k();
        out.finite = out.value.is_finite()
            && (order < 1 || out.d1[..k].iter().all(|v| v.is_finite()))
            && (order < 2 || out.d2[..2 * k - 1].iter().all(|v| v.is_finite()))
            && (order < 3 || out.d3[..3 * k - 2].iter().all(|v| v.is_finite()));
        out
    }

    /// Starting intercept for each linear predictor.
    pub fn initial_eta(&self, ys: &[f64]) -> Vec<f64> {
        let n = ys.len().max(1) as f64;
        let mean = ys.iter().sum::<f64>() / n;
        match self.kind {
            FamilyKind::GaussianIdentity => vec![mean],
            FamilyKind::PoissonLog | FamilyKind::GammaLog => vec![mean.max(0.1).ln()],
            FamilyKind::PoissonIdentity => vec![mean.max(0.1)],
            FamilyKind::GaussianLocScale => {
                let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
                vec![mean, 0.5 * var.max(1e-12).ln()]
            }
            FamilyKind::Elf => vec![crate::data::quantile_type7(ys, self.tau)],
        }
    }

    /// Fitted value on the response scale (mean, or quantile for `Elf`).
    pub fn mean(&self, eta: &[f64]) -> f64 {
        match self.kind {
            FamilyKind::GaussianIdentity
            | FamilyKind::PoissonIdentity
            | FamilyKind::GaussianLocScale
            | FamilyKind::Elf => eta[0],
            FamilyKind::PoissonLog | FamilyKind::GammaLog => eta[0].exp(),
        }
    }

    /// Residual on a common scale, used to rescale cross-validated
    /// leave-out effects: raw residuals for mean models, standardized
    /// for location-scale, and a signed root loss excess for `Elf`.
    pub fn generalized_residual(&self, i: usize, y: f64, eta: &[f64]) -> f64 {
        match self.kind {
            FamilyKind::GaussianIdentity
            | FamilyKind::PoissonIdentity
            | FamilyKind::PoissonLog
            | FamilyKind::GammaLog => y - self.mean(eta),
            FamilyKind::GaussianLocScale => (y - eta[0]) * (-eta[1]).exp(),
            FamilyKind::Elf => {
                let sig = self.sigma_at(i);
                let lam = self.elf_lambda;
                // loss minimizer over the predictor, for this datum
                let qstar = y - lam * sig * ((1.0 - self.tau) / self.tau).ln();
                let dmin = self.eval(i, y, &[qstar], 0).value;
                let d = self.eval(i, y, eta, 0).value;
                (y - eta[0]).signum() * (2.0 * (d - dmin).max(0.0)).sqrt()
            }
        }
    }
}

fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gaussian_is_squared_error() {
        let f = FamilyInstance::gaussian();
        let e = f.eval(0, 3.0, &[1.0], 3);
        assert_eq!(e.value, 4.0);
        assert_eq!(e.d1[0], -4.0);
        assert_eq!(e.d2[0], 2.0);
        assert_eq!(e.d3[0], 0.0);
        assert!(e.finite);
    }

    #[test]
    fn poisson_log_gradient_vanishes_at_observed_mean() {
        let f = FamilyInstance::poisson_log();
        let e = f.eval(0, 2.0, &[2.0f64.ln()], 2);
        assert_abs_diff_eq!(e.d1[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.d2[0], 2.0, epsilon = 1e-14);
        // mu - y ln mu + ln y! at mu = y = 2
        assert_abs_diff_eq!(e.value, 2.0 - 2.0 * 2.0f64.ln() + 2.0f64.ln(), epsilon = 1e-13);
    }

    #[test]
    fn poisson_identity_rejects_nonpositive_mean() {
        let f = FamilyInstance::poisson_identity();
        let e = f.eval(0, 1.0, &[-0.5], 2);
        assert!(!e.finite);
        assert!(e.value.is_infinite());
        let ok = f.eval(0, 3.0, &[3.0], 2);
        assert!(ok.finite);
        assert_abs_diff_eq!(ok.d1[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn gamma_log_matches_closed_form() {
        let f = FamilyInstance::gamma_log(0.5);
        let e = f.eval(0, 2.0, &[0.0], 3);
        assert_abs_diff_eq!(e.value, 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.d1[0], -2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.d2[0], 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.d3[0], -4.0, epsilon = 1e-14);
        // zero response stays finite under the dropped-terms convention
        assert!(f.eval(0, 0.0, &[-1.0], 3).finite);
    }

    #[test]
    fn locscale_at_zero_residual() {
        let f = FamilyInstance::gaulss();
        let eta = [2.0, 0.3];
        let e = f.eval(0, 2.0, &eta, 3);
        let w = (-0.6f64).exp();
        assert_abs_diff_eq!(e.value, 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(e.d1[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.d1[1], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.d2[0], w, epsilon = 1e-14);
        assert_abs_diff_eq!(e.d2[1], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.d3[1], -2.0 * w, epsilon = 1e-14);
    }

    #[test]
    fn elf_center_value_and_slope_limits() {
        let (tau, lam, sig) = (0.8, 0.7, 1.3);
        let f = FamilyInstance::elf(tau, lam, vec![sig]);
        // at y = q the smoothed kink contributes lambda ln 2
        let e = f.eval(0, 1.0, &[1.0], 3);
        assert_abs_diff_eq!(e.value, lam * 2.0f64.ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(e.d1[0], (0.5 - tau) / sig, epsilon = 1e-14);
        assert_abs_diff_eq!(e.d2[0], 0.25 / (lam * sig * sig), epsilon = 1e-14);
        assert_abs_diff_eq!(e.d3[0], 0.0, epsilon = 1e-14);
        // far below the response the slope is -tau / sigma, far above
        // it is (1 - tau) / sigma
        let lo = f.eval(0, 1.0, &[-50.0], 1);
        let hi = f.eval(0, 1.0, &[50.0], 1);
        assert_abs_diff_eq!(lo.d1[0], -tau / sig, epsilon = 1e-12);
        assert_abs_diff_eq!(hi.d1[0], (1.0 - tau) / sig, epsilon = 1e-12);
    }

    #[test]
    fn elf_approaches_pinball_as_bandwidth_shrinks() {
        let (tau, sig) = (0.3, 0.9);
        let f = FamilyInstance::elf(tau, 1e-8, vec![sig]);
        let pin = |y: f64, q: f64| {
            if y >= q {
                tau * (y - q) / sig
            } else {
                (1.0 - tau) * (q - y) / sig
            }
        };
        for (y, q) in [(2.0, 0.5), (0.5, 2.0), (1.0, 1.0), (-3.0, 1.5)] {
            assert_abs_diff_eq!(f.eval(0, y, &[q], 0).value, pin(y, q), epsilon = 1e-7);
        }
    }

    #[test]
    fn elf_second_derivative_is_positive() {
        let f = FamilyInstance::elf(0.95, 0.4, vec![0.8, 1.6]);
        for (i, q) in [(0usize, -4.0), (1, 3.0), (0, 0.0)] {
            assert!(f.eval(i, 0.0, &[q], 2).d2[0] > 0.0);
        }
    }

    #[test]
    fn generalized_residuals_reduce_to_raw_scales() {
        let g = FamilyInstance::gaussian();
        assert_eq!(g.generalized_residual(0, 3.0, &[1.0]), 2.0);
        let p = FamilyInstance::poisson_log();
        assert_abs_diff_eq!(p.generalized_residual(0, 3.0, &[0.0]), 2.0, epsilon = 1e-14);
        let ls = FamilyInstance::gaulss();
        assert_abs_diff_eq!(ls.generalized_residual(0, 3.0, &[1.0, 2.0f64.ln()]), 1.0, epsilon = 1e-14);
        // elf: zero at the per-datum loss minimizer, signed elsewhere
        let f = FamilyInstance::elf(0.5, 0.5, vec![1.0]);
        let qstar = 2.0 - 0.5 * (0.5f64 / 0.5).ln();
        assert_abs_diff_eq!(f.generalized_residual(0, 2.0, &[qstar]), 0.0, epsilon = 1e-12);
        assert!(f.generalized_residual(0, 2.0, &[0.0]) > 0.0);
        assert!(f.generalized_residual(0, 2.0, &[4.0]) < 0.0);
    }

    #[test]
    fn initial_eta_targets_location_summaries() {
        let ys = [1.0, 2.0, 3.0, 6.0];
        assert_eq!(FamilyInstance::gaussian().initial_eta(&ys), vec![3.0]);
        assert_abs_diff_eq!(
            FamilyInstance::poisson_log().initial_eta(&ys)[0],
            3.0f64.ln(),
            epsilon = 1e-14
        );
        let gl = FamilyInstance::gaulss().initial_eta(&ys);
        assert_eq!(gl.len(), 2);
        assert_eq!(gl[0], 3.0);
    }
}
