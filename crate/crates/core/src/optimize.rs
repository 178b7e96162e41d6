//! Outer optimization of the log smoothing parameters.
//!
//! A BFGS iteration on a boxed domain, with a strong-Wolfe line search.
//! Nonfinite objective values are treated as sufficient-decrease
//! failures, so the search backs away from divergent regions. Components
//! whose smoothing parameter has stopped influencing the fit (the
//! coefficient sensitivity and the criterion gradient are both tiny) are
//! frozen: their direction entries are zeroed and they are excluded from
//! the convergence test, but they thaw again the moment either signal
//! returns.
//!
//! The driver is generic over the objective so that the cross-validation
//! criterion and the comparator criteria share one implementation.

use ndarray::{Array1, Array2, ArrayView1};

use crate::fit::{fit_inner, FitOptions, FittedModel, Problem};
use crate::ncv::{ncv_criterion, NcvError, NcvOptions, NcvResult};
use crate::scheme::NeighbourhoodScheme;

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
/// Sensitivity threshold (per coefficient) below which a component can
/// freeze.
const FREEZE_SENSITIVITY: f64 = 1e-8;
/// Gradient threshold (relative to the value) below which a component
/// can freeze.
const FREEZE_GRAD: f64 = 1e-6;

/// One objective evaluation.
#[derive(Debug, Clone)]
pub struct OuterEval {
    pub value: f64,
    pub grad: Array1<f64>,
    /// Per-component sensitivity scores `(dbeta/drho_j)' H_lam
    /// (dbeta/drho_j)`; `None` disables freezing.
    pub freeze_scores: Option<Array1<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterStatus {
    /// Projected gradient below tolerance.
    Converged,
    /// Iteration budget exhausted.
    MaxIter,
    /// No acceptable step along the search direction.
    StalledLineSearch,
}

/// Snapshot of one outer iteration, in acceptance order.
#[derive(Debug, Clone)]
pub struct OuterState {
    pub iter: usize,
    pub rho: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub frozen: Vec<bool>,
    pub step_scale: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeOptions {
    pub max_iter: usize,
    /// Convergence threshold on the projected gradient, relative to
    /// `1 + |value|`.
    pub grad_tol: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub fit: FitOptions,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            max_iter: 100,
            grad_tol: 1e-6,
            rho_min: -20.0,
            rho_max: 20.0,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OuterResult {
    pub rho: Array1<f64>,
    pub value: f64,
    pub grad: Array1<f64>,
    pub status: OuterStatus,
    pub trace: Vec<OuterState>,
    pub evaluations: usize,
}

/// Components pinned by freezing or by the box: returns the direction
/// mask and the projected gradient infinity norm.
fn project(
    grad: &Array1<f64>,
    rho: &Array1<f64>,
    frozen: &[bool],
    opts: &OptimizeOptions,
) -> (Vec<bool>, f64) {
    let mut active = vec![true; grad.len()];
    let mut norm = 0.0f64;
    for j in 0..grad.len() {
        let at_lo = rho[j] <= opts.rho_min + 1e-12 && grad[j] > 0.0;
        let at_hi = rho[j] >= opts.rho_max - 1e-12 && grad[j] < 0.0;
        if frozen[j] || at_lo || at_hi {
            active[j] = false;
        } else {
            norm = norm.max(grad[j].abs());
        }
    }
    (active, norm)
}

fn frozen_mask(eval: &OuterEval, p_coef: f64) -> Vec<bool> {
    match &eval.freeze_scores {
        None => vec![false; eval.grad.len()],
        Some(scores) => scores
            .iter()
            .zip(eval.grad.iter())
            .map(|(s, g)| {
                *s < FREEZE_SENSITIVITY * p_coef
                    && g.abs() < FREEZE_GRAD * (1.0 + eval.value.abs())
            })
            .collect(),
    }
}

/// Minimizes a boxed objective by BFGS with a strong-Wolfe line search.
/// `p_coef` scales the freeze threshold (number of model coefficients).
pub fn optimize_with<E>(
    mut eval_fn: impl FnMut(ArrayView1<f64>) -> Result<OuterEval, E>,
    rho0: ArrayView1<f64>,
    p_coef: f64,
    opts: &OptimizeOptions,
) -> Result<OuterResult, E> {
    let m = rho0.len();
    let mut evaluations = 0usize;
    let mut rho = rho0.to_owned();
    for v in rho.iter_mut() {
        *v = v.clamp(opts.rho_min, opts.rho_max);
    }
    if m == 0 {
        let eval = eval_fn(rho.view())?;
        return Ok(OuterResult {
            rho,
            value: eval.value,
            grad: eval.grad,
            status: OuterStatus::Converged,
            trace: vec![OuterState {
                iter: 0,
                rho: Vec::new(),
                value: eval.value,
                grad: Vec::new(),
                frozen: Vec::new(),
                step_scale: 0.0,
            }],
            evaluations: 1,
        });
    }

    let mut eval = eval_fn(rho.view())?;
    evaluations += 1;
    let g0_norm = eval.grad.dot(&eval.grad).sqrt().max(1e-12);
    let mut hinv = Array2::<f64>::eye(m) / g0_norm;
    let mut frozen = frozen_mask(&eval, p_coef);
    let mut trace = vec![OuterState {
        iter: 0,
        rho: rho.to_vec(),
        value: eval.value,
        grad: eval.grad.to_vec(),
        frozen: frozen.clone(),
        step_scale: 0.0,
    }];
    let mut status = OuterStatus::MaxIter;

    for iter in 1..=opts.max_iter {
        let (active, proj_norm) = project(&eval.grad, &rho, &frozen, opts);
        if proj_norm <= opts.grad_tol * (1.0 + eval.value.abs()) {
            status = OuterStatus::Converged;
            break;
        }

        // search direction from the inverse-Hessian, restricted to
        // active components
        let mut dir = -hinv.dot(&eval.grad);
        for j in 0..m {
            if !active[j] {
                dir[j] = 0.0;
            }
        }
        let mut slope = dir.dot(&eval.grad);
        if !(slope < 0.0) {
            // restart on a bad direction
            hinv = Array2::eye(m) / eval.grad.dot(&eval.grad).sqrt().max(1e-12);
            dir = -hinv.dot(&eval.grad);
            for j in 0..m {
                if !active[j] {
                    dir[j] = 0.0;
                }
            }
            slope = dir.dot(&eval.grad);
            if !(slope < 0.0) {
                status = OuterStatus::StalledLineSearch;
                break;
            }
        }

        // largest step that stays inside the box
        let mut alpha_max = f64::INFINITY;
        for j in 0..m {
            if dir[j] > 0.0 {
                alpha_max = alpha_max.min((opts.rho_max - rho[j]) / dir[j]);
            } else if dir[j] < 0.0 {
                alpha_max = alpha_max.min((opts.rho_min - rho[j]) / dir[j]);
            }
        }
        if !(alpha_max > 0.0) {
            status = OuterStatus::StalledLineSearch;
            break;
        }

        match wolfe_search(&mut eval_fn, &rho, &dir, &eval, slope, alpha_max, &mut evaluations)? {
            None => {
                status = OuterStatus::StalledLineSearch;
                break;
            }
            Some((alpha, new_rho, new_eval)) => {
                let s = &new_rho - &rho;
                let yv = &new_eval.grad - &eval.grad;
                let sty = s.dot(&yv);
                if sty > 1e-10 * s.dot(&s).sqrt() * yv.dot(&yv).sqrt() {
                    // standard BFGS inverse update with curvature guard
                    let rho_bfgs = 1.0 / sty;
                    let hy = hinv.dot(&yv);
                    let yhy = yv.dot(&hy);
                    let mut upd = Array2::<f64>::zeros((m, m));
                    for a in 0..m {
                        for b in 0..m {
                            upd[[a, b]] = hinv[[a, b]]
                                - rho_bfgs * (s[a] * hy[b] + hy[a] * s[b])
                                + rho_bfgs * (1.0 + rho_bfgs * yhy) * s[a] * s[b];
                        }
                    }
                    hinv = upd;
                }
                rho = new_rho;
                let new_frozen = frozen_mask(&new_eval, p_coef);
                if new_frozen != frozen {
                    // the active set changed; restart curvature
                    hinv = Array2::eye(m) / new_eval.grad.dot(&new_eval.grad).sqrt().max(1e-12);
                    frozen = new_frozen;
                }
                eval = new_eval;
                trace.push(OuterState {
                    iter,
                    rho: rho.to_vec(),
                    value: eval.value,
                    grad: eval.grad.to_vec(),
                    frozen: frozen.clone(),
                    step_scale: alpha,
                });
            }
        }
    }

    if status == OuterStatus::MaxIter {
        let (_, proj_norm) = project(&eval.grad, &rho, &frozen, opts);
        if proj_norm <= opts.grad_tol * (1.0 + eval.value.abs()) {
            status = OuterStatus::Converged;
        }
    }
    Ok(OuterResult { rho, value: eval.value, grad: eval.grad, status, trace, evaluations })
}

type SearchHit = (f64, Array1<f64>, OuterEval);

/// Strong-Wolfe line search (bracket then zoom). Nonfinite values fail
/// the sufficient-decrease test, shrinking the bracket.
fn wolfe_search<E>(
    eval_fn: &mut impl FnMut(ArrayView1<f64>) -> Result<OuterEval, E>,
    rho: &Array1<f64>,
    dir: &Array1<f64>,
    at0: &OuterEval,
    slope0: f64,
    alpha_max: f64,
    evaluations: &mut usize,
) -> Result<Option<SearchHit>, E> {
    let phi0 = at0.value;
    let mut probe = |alpha: f64| -> Result<(Array1<f64>, OuterEval, f64), E> {
        let cand = rho + &(dir * alpha);
        let ev = eval_fn(cand.view())?;
        *evaluations += 1;
        let dphi = ev.grad.dot(dir);
        Ok((cand, ev, dphi))
    };

    let mut alpha_prev = 0.0f64;
    let mut phi_prev = phi0;
    let mut alpha = alpha_max.min(1.0);
    let mut bracket: Option<(f64, f64, f64)> = None; // lo, phi_lo, hi
    let mut best_lo: Option<SearchHit> = None;

    for it in 0..12 {
        let (cand, ev, dphi) = probe(alpha)?;
        let armijo_fail = !ev.value.is_finite() || ev.value > phi0 + WOLFE_C1 * alpha * slope0;
        if armijo_fail || (it > 0 && ev.value >= phi_prev) {
            bracket = Some((alpha_prev, phi_prev, alpha));
            break;
        }
        if dphi.abs() <= -WOLFE_C2 * slope0 {
            return Ok(Some((alpha, cand, ev)));
        }
        let phi = ev.value;
        best_lo = Some((alpha, cand, ev));
        if dphi >= 0.0 {
            bracket = Some((alpha, phi, alpha_prev));
            break;
        }
        if alpha >= alpha_max {
            // capped by the box with the slope still negative
            return Ok(best_lo);
        }
        alpha_prev = alpha;
        phi_prev = phi;
        alpha = (alpha * 2.0).min(alpha_max);
    }

    let (mut lo, mut phi_lo, mut hi) = match bracket {
        Some(b) => b,
        None => return Ok(best_lo),
    };

    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() < 1e-14 {
            break;
        }
        let (cand, ev, dphi) = probe(mid)?;
        let armijo_fail = !ev.value.is_finite() || ev.value > phi0 + WOLFE_C1 * mid * slope0;
        if armijo_fail || ev.value >= phi_lo {
            hi = mid;
            continue;
        }
        if dphi.abs() <= -WOLFE_C2 * slope0 {
            return Ok(Some((mid, cand, ev)));
        }
        best_lo = Some((mid, cand.clone(), ev.clone()));
        if dphi * (hi - lo) >= 0.0 {
            hi = lo;
        }
        lo = mid;
        phi_lo = ev.value;
    }

    // fall back to the best sufficient-decrease point seen
    if let Some((alpha, cand, ev)) = best_lo {
        if ev.value < phi0 {
            return Ok(Some((alpha, cand, ev)));
        }
    }
    Ok(None)
}

/// Final state of a smoothing-parameter optimization over the
/// cross-validation criterion.
#[derive(Debug)]
pub struct NcvOptimum {
    pub fit: FittedModel,
    pub ncv: NcvResult,
    pub outer: OuterResult,
}

/// Optimizes the cross-validation criterion over `rho`, warm-starting
/// every inner fit from the previous one.
pub fn optimize_ncv(
    problem: &Problem,
    scheme: &NeighbourhoodScheme,
    rho0: ArrayView1<f64>,
    ncv_opts: &NcvOptions,
    opts: &OptimizeOptions,
) -> Result<NcvOptimum, NcvError> {
    let mut warm: Option<Array1<f64>> = None;
    let mut last: Option<(Array1<f64>, FittedModel, NcvResult)> = None;
    let grad_opts = NcvOptions { want_grad: true, ..ncv_opts.clone() };
    let p_coef = problem.p() as f64;

    let outer = optimize_with(
        |rho: ArrayView1<f64>| -> Result<OuterEval, NcvError> {
            let fit = fit_inner(problem, rho, warm.as_ref().map(|w| w.view()), &opts.fit)?;
            warm = Some(fit.beta.clone());
            let res = ncv_criterion(problem, &fit, scheme, &grad_opts)?;
            let grad = res.grad.clone().expect("gradient requested");
            // sensitivity of the coefficients to each component
            let scores = Array1::from_iter((0..problem.m()).map(|j| {
                let d = fit.dbeta_drho.column(j);
                d.dot(&fit.h_lam.dot(&d))
            }));
            let eval = OuterEval { value: res.value, grad, freeze_scores: Some(scores) };
            last = Some((rho.to_owned(), fit, res));
            Ok(eval)
        },
        rho0,
        p_coef,
        opts,
    )?;

    // the cached fit may belong to a rejected trial point
    let refresh = match &last {
        Some((rho, _, _)) => rho != &outer.rho,
        None => true,
    };
    if refresh {
        let fit = fit_inner(problem, outer.rho.view(), warm.as_ref().map(|w| w.view()), &opts.fit)?;
        let res = ncv_criterion(problem, &fit, scheme, &grad_opts)?;
        last = Some((outer.rho.clone(), fit, res));
    }
    let (_, fit, ncv) = last.expect("at least one evaluation");
    Ok(NcvOptimum { fit, ncv, outer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataTable;
    use crate::loss::FamilyInstance;
    use crate::model::{build_design, ModelSpec, TermDef};
    use crate::scheme::{make_scheme, SchemeKind};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn no_freeze(value: f64, grad: Array1<f64>) -> OuterEval {
        OuterEval { value, grad, freeze_scores: None }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = array![1.5, -2.0];
        let res = optimize_with::<()>(
            |rho| {
                let d = &rho.to_owned() - &target;
                Ok(no_freeze(d.dot(&d), 2.0 * d))
            },
            array![5.0, 5.0].view(),
            1.0,
            &OptimizeOptions::default(),
        )
        .unwrap();
        assert_eq!(res.status, OuterStatus::Converged);
        assert_abs_diff_eq!(res.rho[0], 1.5, epsilon = 1e-5);
        assert_abs_diff_eq!(res.rho[1], -2.0, epsilon = 1e-5);
    }

    #[test]
    fn banana_valley_converges() {
        let res = optimize_with::<()>(
            |rho| {
                let (a, b) = (rho[0], rho[1]);
                let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = array![
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a)
                ];
                Ok(no_freeze(v, g))
            },
            array![-1.2, 1.0].view(),
            1.0,
            &OptimizeOptions { max_iter: 300, ..OptimizeOptions::default() },
        )
        .unwrap();
        assert_eq!(res.status, OuterStatus::Converged);
        assert_abs_diff_eq!(res.rho[0], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(res.rho[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn box_constraint_pins_the_minimizer() {
        let res = optimize_with::<()>(
            |rho| {
                let d = rho[0] + 25.0;
                Ok(no_freeze(d * d, array![2.0 * d]))
            },
            array![0.0].view(),
            1.0,
            &OptimizeOptions::default(),
        )
        .unwrap();
        assert_eq!(res.rho[0], -20.0);
        assert_eq!(res.status, OuterStatus::Converged);
    }

    #[test]
    fn nonfinite_regions_are_avoided() {
        // objective blows up past 3; optimum at 2.8
        let res = optimize_with::<()>(
            |rho| {
                let x = rho[0];
                if x > 3.0 {
                    Ok(no_freeze(f64::INFINITY, array![f64::NAN]))
                } else {
                    let d = x - 2.8;
                    Ok(no_freeze(d * d, array![2.0 * d]))
                }
            },
            array![-5.0].view(),
            1.0,
            &OptimizeOptions::default(),
        )
        .unwrap();
        assert_eq!(res.status, OuterStatus::Converged);
        assert_abs_diff_eq!(res.rho[0], 2.8, epsilon = 1e-5);
    }

    #[test]
    fn flat_components_freeze_and_stay_put() {
        // flat in the second coordinate, with a sensitivity score that
        // reports it as inert
        let res = optimize_with::<()>(
            |rho| {
                let d = rho[0] - 1.0;
                Ok(OuterEval {
                    value: d * d,
                    grad: array![2.0 * d, 0.0],
                    freeze_scores: Some(array![1.0, 1e-15]),
                })
            },
            array![4.0, 7.0].view(),
            10.0,
            &OptimizeOptions::default(),
        )
        .unwrap();
        assert_eq!(res.status, OuterStatus::Converged);
        assert_abs_diff_eq!(res.rho[0], 1.0, epsilon = 1e-5);
        assert_eq!(res.rho[1], 7.0);
        assert!(res.trace.last().unwrap().frozen[1]);
    }

    #[test]
    fn ncv_optimum_is_a_criterion_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let n = 60;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> =
            xs.iter().map(|x| (6.0 * x).sin() + 0.3 * rng.random_range(-1.0..1.0)).collect();
        let mut t = DataTable::new();
        t.push_numeric("x", xs).unwrap();
        let spec =
            ModelSpec::build(&[vec![TermDef::Spline { var: "x".into(), k: 12, m: 2 }]], &t).unwrap();
        let x = build_design(&spec, &t).unwrap();
        let problem = Problem::new(
            x,
            Array1::from(ys),
            spec.pred_cols.clone(),
            spec.penalties().to_vec(),
            FamilyInstance::gaussian(),
        )
        .unwrap();
        let scheme = make_scheme(&SchemeKind::Loo, &t).unwrap();
        let opt = optimize_ncv(
            &problem,
            &scheme,
            array![0.0].view(),
            &NcvOptions::default(),
            &OptimizeOptions::default(),
        )
        .unwrap();
        assert_eq!(opt.outer.status, OuterStatus::Converged);
        // the reported fit belongs to the reported optimum
        assert_abs_diff_eq!(opt.ncv.value, opt.outer.value, epsilon = 1e-12);
        assert_eq!(opt.fit.rho[0], opt.outer.rho[0]);
        // nearby smoothing levels do not beat it
        let fit_opts = FitOptions::default();
        for drho in [-0.5, 0.5] {
            let fit = fit_inner(
                &problem,
                array![opt.outer.rho[0] + drho].view(),
                Some(opt.fit.beta.view()),
                &fit_opts,
            )
            .unwrap();
            let v = ncv_criterion(
                &problem,
                &fit,
                &scheme,
                &NcvOptions { want_grad: false, ..NcvOptions::default() },
            )
            .unwrap()
            .value;
            assert!(v >= opt.outer.value - 1e-9, "{v} < {}", opt.outer.value);
        }
        // trace starts at the initial point and records acceptances
        assert!(opt.outer.trace.len() >= 2);
        assert_eq!(opt.outer.trace[0].iter, 0);
    }
}
