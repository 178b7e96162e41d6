//! Design matrices and quadratic penalties.
//!
//! Smooth terms are cubic B-splines on equally spaced knots with an
//! order-`m` difference penalty on the coefficient sequence; 2-d smooths
//! are tensor products of two marginal bases with one difference penalty
//! per margin. Each smooth block absorbs a sum-to-zero constraint (its
//! columns are made orthogonal to the intercept) by one Householder
//! reflection and dropping the first transformed column, which keeps the
//! penalty quadratic in the reduced coefficients.
//!
//! Knots cover the training range of the covariate and evaluation is
//! accepted up to one knot spacing beyond it on either side.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

use crate::data::{DataError, DataTable};
use crate::linalg::sym_eigen;

/// Cubic splines throughout.
const DEGREE: usize = 3;

/// Relative eigenvalue cutoff when counting a penalty's null space.
const NULL_EIG_REL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("covariate {var:?} value {value} outside accepted range [{lo}, {hi}]")]
    CovariateOutOfRange { var: String, value: f64, lo: f64, hi: f64 },
    #[error("factor {var:?} has unseen level {level:?}")]
    UnknownLevel { var: String, level: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One model term, before any data is seen.
#[derive(Debug, Clone, PartialEq)]
pub enum TermDef {
    /// `s(var, k, m)`: cubic spline with basis dimension `k` and an
    /// order-`m` difference penalty.
    Spline { var: String, k: usize, m: usize },
    /// `te(var1, var2, k1, k2, m)`: tensor-product smooth, one penalty
    /// per margin.
    Tensor { vars: [String; 2], k: [usize; 2], m: usize },
    /// Centered linear column, unpenalized.
    Linear { var: String },
    /// Treatment-coded factor (first level dropped), unpenalized.
    Factor { var: String },
}

#[derive(Debug, Clone)]
pub enum BlockKind {
    Intercept,
    Spline { var: String, knots: Vec<f64> },
    Tensor { vars: [String; 2], knots: [Vec<f64>; 2] },
    Linear { var: String, center: f64 },
    Factor { var: String, levels: Vec<String> },
}

/// A contiguous run of design columns produced by one term, with the
/// data-derived state needed to evaluate new covariate values.
#[derive(Debug, Clone)]
pub struct BasisBlock {
    pub kind: BlockKind,
    pub predictor: usize,
    pub cols: Range<usize>,
    pub raw_dim: usize,
    /// Unit Householder vector of the absorbed sum-to-zero constraint
    /// (raw-coefficient space); absent for unconstrained blocks.
    pub constraint: Option<Array1<f64>>,
    pub label: String,
}

impl BasisBlock {
    pub fn dim(&self) -> usize {
        self.cols.len()
    }
}

/// Quadratic penalty `beta[cols]' core beta[cols]` for one smoothing
/// parameter. `core` lives in the block's post-constraint coordinates.
#[derive(Debug, Clone)]
pub struct PenaltyMatrix {
    pub block: usize,
    pub offset: usize,
    pub core: Array2<f64>,
    pub null_dim: usize,
    pub label: String,
}

impl PenaltyMatrix {
    pub fn dim(&self) -> usize {
        self.core.nrows()
    }

    /// Dense `p x p` embedding (tests, comparators).
    pub fn embed(&self, p: usize) -> Array2<f64> {
        let q = self.dim();
        let mut s = Array2::<f64>::zeros((p, p));
        for i in 0..q {
            for j in 0..q {
                s[[self.offset + i, self.offset + j]] = self.core[[i, j]];
            }
        }
        s
    }

    /// `S beta` into a dense vector.
    pub fn mul_vec(&self, beta: ArrayView1<f64>, out: &mut Array1<f64>) {
        let q = self.dim();
        for i in 0..q {
            let mut acc = 0.0;
            for j in 0..q {
                acc += self.core[[i, j]] * beta[self.offset + j];
            }
            out[self.offset + i] += acc;
        }
    }

    /// `beta' S beta`.
    pub fn quad_form(&self, beta: ArrayView1<f64>) -> f64 {
        let q = self.dim();
        let mut acc = 0.0;
        for i in 0..q {
            let mut row = 0.0;
            for j in 0..q {
                row += self.core[[i, j]] * beta[self.offset + j];
            }
            acc += row * beta[self.offset + i];
        }
        acc
    }
}

/// A fully resolved model: blocks with frozen knots/centers/levels,
/// penalties, and the column set of each linear predictor.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub blocks: Vec<BasisBlock>,
    penalties: Vec<PenaltyMatrix>,
    pub k: usize,
    pub p: usize,
    pub pred_cols: Vec<Vec<usize>>,
}

impl ModelSpec {
    /// Resolves term definitions against training data: derives knots,
    /// centers, and factor levels, and absorbs identifiability
    /// constraints. `terms[k]` holds the terms of linear predictor `k`;
    /// every predictor gets an intercept column ahead of its terms.
    pub fn build(terms: &[Vec<TermDef>], data: &DataTable) -> Result<ModelSpec, ModelError> {
        if terms.is_empty() {
            return Err(ModelError::InvalidSpec("at least one linear predictor required".into()));
        }
        if data.n() == 0 {
            return Err(ModelError::InvalidSpec("empty data table".into()));
        }
        let mut blocks = Vec::new();
        let mut pred_cols: Vec<Vec<usize>> = Vec::new();
        let mut col = 0usize;
        for (pred, pred_terms) in terms.iter().enumerate() {
            let first_col = col;
            blocks.push(BasisBlock {
                kind: BlockKind::Intercept,
                predictor: pred,
                cols: col..col + 1,
                raw_dim: 1,
                constraint: None,
                label: "intercept".into(),
            });
            col += 1;
            for term in pred_terms {
                let block = resolve_term(term, pred, col, data)?;
                col = block.cols.end;
                blocks.push(block);
            }
            pred_cols.push((first_col..col).collect());
        }
        let mut spec = ModelSpec { blocks, penalties: Vec::new(), k: terms.len(), p: col, pred_cols };
        spec.penalties = assemble_penalties(&spec, terms)?;
        Ok(spec)
    }

    pub fn penalties(&self) -> &[PenaltyMatrix] {
        &self.penalties
    }

    /// Number of smoothing parameters.
    pub fn m(&self) -> usize {
        self.penalties.len()
    }
}

/// Evaluates the design matrix of a resolved model on a data table.
pub fn build_design(spec: &ModelSpec, data: &DataTable) -> Result<Array2<f64>, ModelError> {
    let n = data.n();
    let mut x = Array2::<f64>::zeros((n, spec.p));
    for block in &spec.blocks {
        let raw = eval_raw_block(block, data)?;
        match &block.constraint {
            None => {
                x.slice_mut(ndarray::s![.., block.cols.clone()]).assign(&raw);
            }
            Some(v) => {
                // B H with H = I - 2 v v', then drop the first column.
                let bv = raw.dot(v);
                for i in 0..n {
                    for (c, j) in (1..block.raw_dim).enumerate() {
                        x[[i, block.cols.start + c]] = raw[[i, j]] - 2.0 * bv[i] * v[j];
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Returns the model's penalties (one per smoothing parameter).
pub fn build_penalties(spec: &ModelSpec) -> Vec<PenaltyMatrix> {
    spec.penalties.clone()
}

/// Linear predictors `eta[i, k] = X[i, J_k] beta[J_k]`.
pub fn predict_linear(spec: &ModelSpec, x: ArrayView2<f64>, beta: ArrayView1<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut eta = Array2::<f64>::zeros((n, spec.k));
    for (k, cols) in spec.pred_cols.iter().enumerate() {
        for i in 0..n {
            let mut acc = 0.0;
            for &j in cols {
                acc += x[[i, j]] * beta[j];
            }
            eta[[i, k]] = acc;
        }
    }
    eta
}

/// Order-`m` forward-difference matrix mapped through `D' D`.
pub fn difference_penalty(q: usize, m: usize) -> Array2<f64> {
    assert!(m >= 1 && m < q, "difference order must satisfy 1 <= m < q");
    // Binomial row with alternating signs, e.g. m = 2 -> (1, -2, 1).
    let mut coef = vec![0.0f64; m + 1];
    for i in 0..=m {
        let mut c = 1.0;
        for t in 0..i {
            c = c * (m - t) as f64 / (t + 1) as f64;
        }
        coef[i] = if (m - i) % 2 == 0 { c } else { -c };
    }
    let mut s = Array2::<f64>::zeros((q, q));
    for r in 0..q - m {
        for a in 0..=m {
            for b in 0..=m {
                s[[r + a, r + b]] += coef[a] * coef[b];
            }
        }
    }
    s
}

fn resolve_term(
    term: &TermDef,
    pred: usize,
    col: usize,
    data: &DataTable,
) -> Result<BasisBlock, ModelError> {
    match term {
        TermDef::Spline { var, k, m } => {
            if *k < 5 {
                return Err(ModelError::InvalidSpec(format!("s({var}): basis dimension {k} < 5")));
            }
            if *m >= *k {
                return Err(ModelError::InvalidSpec(format!("s({var}): penalty order {m} >= k")));
            }
            let xs = data.numeric(var)?;
            let knots = uniform_knots(xs, *k, var)?;
            let raw_dim = *k;
            let mut block = BasisBlock {
                kind: BlockKind::Spline { var: var.clone(), knots },
                predictor: pred,
                cols: col..col + raw_dim - 1,
                raw_dim,
                constraint: None,
                label: format!("s({var})"),
            };
            block.constraint = Some(constraint_vector(&block, data)?);
            Ok(block)
        }
        TermDef::Tensor { vars, k, m } => {
            for (v, ki) in vars.iter().zip(k.iter()) {
                if *ki < 5 {
                    return Err(ModelError::InvalidSpec(format!("te({v}): margin dimension {ki} < 5")));
                }
                if *m >= *ki {
                    return Err(ModelError::InvalidSpec(format!("te({v}): penalty order {m} >= k")));
                }
            }
            let knots0 = uniform_knots(data.numeric(&vars[0])?, k[0], &vars[0])?;
            let knots1 = uniform_knots(data.numeric(&vars[1])?, k[1], &vars[1])?;
            let raw_dim = k[0] * k[1];
            let mut block = BasisBlock {
                kind: BlockKind::Tensor { vars: vars.clone(), knots: [knots0, knots1] },
                predictor: pred,
                cols: col..col + raw_dim - 1,
                raw_dim,
                constraint: None,
                label: format!("te({},{})", vars[0], vars[1]),
            };
            block.constraint = Some(constraint_vector(&block, data)?);
            Ok(block)
        }
        TermDef::Linear { var } => {
            let xs = data.numeric(var)?;
            let center = xs.iter().sum::<f64>() / xs.len() as f64;
            Ok(BasisBlock {
                kind: BlockKind::Linear { var: var.clone(), center },
                predictor: pred,
                cols: col..col + 1,
                raw_dim: 1,
                constraint: None,
                label: format!("lin({var})"),
            })
        }
        TermDef::Factor { var } => {
            let (levels, _) = data.factor(var)?;
            if levels.len() < 2 {
                return Err(ModelError::InvalidSpec(format!("fac({var}): fewer than 2 levels")));
            }
            let dim = levels.len() - 1;
            Ok(BasisBlock {
                kind: BlockKind::Factor { var: var.clone(), levels: levels.to_vec() },
                predictor: pred,
                cols: col..col + dim,
                raw_dim: dim,
                constraint: None,
                label: format!("fac({var})"),
            })
        }
    }
}

/// Equally spaced cubic-spline knots: interior spacing covers the data
/// range, extended by `DEGREE` spacings outside each end so that `q`
/// basis functions are defined, and values are accepted one spacing
/// beyond the range.
fn uniform_knots(xs: &[f64], q: usize, var: &str) -> Result<Vec<f64>, ModelError> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in xs {
        if !x.is_finite() {
            return Err(ModelError::InvalidSpec(format!("covariate {var:?} has nonfinite values")));
        }
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !(hi > lo) {
        return Err(ModelError::InvalidSpec(format!("covariate {var:?} has zero range")));
    }
    let h = (hi - lo) / (q - DEGREE) as f64;
    Ok((0..q + DEGREE + 1).map(|j| lo + (j as f64 - DEGREE as f64) * h).collect())
}

/// All cubic B-spline values at `x`: fills `vals[0..4]` and returns the
/// index of the first active basis function (may start below 0 at the
/// left extension; callers drop out-of-range entries).
fn cubic_row(knots: &[f64], x: f64, vals: &mut [f64; 4]) -> isize {
    let q = knots.len() - DEGREE - 1;
    let h = knots[1] - knots[0];
    let mut span = DEGREE as isize + ((x - knots[DEGREE]) / h).floor() as isize;
    span = span.clamp(DEGREE as isize - 1, q as isize);
    let l = span as usize;
    let mut left = [0.0f64; DEGREE + 1];
    let mut right = [0.0f64; DEGREE + 1];
    vals[0] = 1.0;
    for j in 1..=DEGREE {
        left[j] = x - knots[l + 1 - j];
        right[j] = knots[l + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = vals[r] / (right[r + 1] + left[j - r]);
            vals[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        vals[j] = saved;
    }
    span - DEGREE as isize
}

fn spline_range(knots: &[f64]) -> (f64, f64) {
    let q = knots.len() - DEGREE - 1;
    // accepted domain: one spacing beyond the training range
    (knots[DEGREE - 1], knots[q + 1])
}

fn eval_spline_into(
    knots: &[f64],
    var: &str,
    x: f64,
    row: &mut [f64],
) -> Result<(), ModelError> {
    let (lo, hi) = spline_range(knots);
    let slack = 1e-10 * (hi - lo);
    if !x.is_finite() || x < lo - slack || x > hi + slack {
        return Err(ModelError::CovariateOutOfRange { var: var.to_owned(), value: x, lo, hi });
    }
    let q = knots.len() - DEGREE - 1;
    let mut vals = [0.0f64; 4];
    let first = cubic_row(knots, x, &mut vals);
    for (t, v) in vals.iter().enumerate() {
        let j = first + t as isize;
        if j >= 0 && (j as usize) < q {
            row[j as usize] = *v;
        }
    }
    Ok(())
}

/// Raw (pre-constraint) block design on a data table.
fn eval_raw_block(block: &BasisBlock, data: &DataTable) -> Result<Array2<f64>, ModelError> {
    let n = data.n();
    let mut out = Array2::<f64>::zeros((n, block.raw_dim));
    match &block.kind {
        BlockKind::Intercept => out.fill(1.0),
        BlockKind::Spline { var, knots } => {
            let xs = data.numeric(var)?;
            for i in 0..n {
                eval_spline_into(knots, var, xs[i], out.row_mut(i).into_slice().expect("contiguous"))?;
            }
        }
        BlockKind::Tensor { vars, knots } => {
            let xs = data.numeric(&vars[0])?;
            let zs = data.numeric(&vars[1])?;
            let q0 = knots[0].len() - DEGREE - 1;
            let q1 = knots[1].len() - DEGREE - 1;
            let mut row0 = vec![0.0f64; q0];
            let mut row1 = vec![0.0f64; q1];
            for i in 0..n {
                row0.iter_mut().for_each(|v| *v = 0.0);
                row1.iter_mut().for_each(|v| *v = 0.0);
                eval_spline_into(&knots[0], &vars[0], xs[i], &mut row0)?;
                eval_spline_into(&knots[1], &vars[1], zs[i], &mut row1)?;
                for a in 0..q0 {
                    if row0[a] == 0.0 {
                        continue;
                    }
                    for b in 0..q1 {
                        out[[i, a * q1 + b]] = row0[a] * row1[b];
                    }
                }
            }
        }
        BlockKind::Linear { var, center } => {
            let xs = data.numeric(var)?;
            for i in 0..n {
                out[[i, 0]] = xs[i] - center;
            }
        }
        BlockKind::Factor { var, levels } => {
            let (data_levels, codes) = data.factor(var)?;
            // map through the stored training levels
            let mut remap = vec![usize::MAX; data_levels.len()];
            for (c, lvl) in data_levels.iter().enumerate() {
                match levels.binary_search(lvl) {
                    Ok(t) => remap[c] = t,
                    Err(_) => {
                        return Err(ModelError::UnknownLevel { var: var.clone(), level: lvl.clone() })
                    }
                }
            }
            for i in 0..n {
                let t = remap[codes[i]];
                if t > 0 {
                    out[[i, t - 1]] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// Unit Householder vector absorbing the block's sum-to-zero constraint,
/// derived from training-data column sums.
fn constraint_vector(block: &BasisBlock, data: &DataTable) -> Result<Array1<f64>, ModelError> {
    let raw = eval_raw_block(block, data)?;
    let mut c = Array1::<f64>::zeros(block.raw_dim);
    for i in 0..raw.nrows() {
        for j in 0..block.raw_dim {
            c[j] += raw[[i, j]];
        }
    }
    let norm = c.dot(&c).sqrt();
    if !(norm > 0.0) {
        return Err(ModelError::InvalidSpec(format!("{}: degenerate constraint", block.label)));
    }
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    c[0] += sign * norm;
    let vnorm = c.dot(&c).sqrt();
    Ok(&c / vnorm)
}

/// Applies the block's constraint to a raw-space penalty and counts the
/// resulting null space.
fn constrained_penalty(
    block_idx: usize,
    block: &BasisBlock,
    core_raw: Array2<f64>,
    label: String,
) -> PenaltyMatrix {
    let core = match &block.constraint {
        None => core_raw,
        Some(v) => {
            // (H S H)[1.., 1..] with H = I - 2 v v'
            let sv = core_raw.dot(v);
            let vsv = v.dot(&sv);
            let q = block.raw_dim;
            let mut hsh = core_raw;
            for i in 0..q {
                for j in 0..q {
                    hsh[[i, j]] += -2.0 * v[i] * sv[j] - 2.0 * sv[i] * v[j]
                        + 4.0 * vsv * v[i] * v[j];
                }
            }
            let mut out = Array2::<f64>::zeros((q - 1, q - 1));
            for i in 1..q {
                for j in 1..q {
                    out[[i - 1, j - 1]] = 0.5 * (hsh[[i, j]] + hsh[[j, i]]);
                }
            }
            out
        }
    };
    let (vals, _) = sym_eigen(core.view());
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let null_dim = vals.iter().filter(|v| v.abs() <= NULL_EIG_REL * scale).count();
    PenaltyMatrix { block: block_idx, offset: block.cols.start, core, null_dim, label }
}

fn assemble_penalties(spec: &ModelSpec, terms: &[Vec<TermDef>]) -> Result<Vec<PenaltyMatrix>, ModelError> {
    let mut penalties = Vec::new();
    // walk blocks in order; skip the auto intercepts
    let mut term_iter = terms.iter().flatten();
    for (b, block) in spec.blocks.iter().enumerate() {
        if matches!(block.kind, BlockKind::Intercept) {
            continue;
        }
        let term = term_iter.next().expect("one term per non-intercept block");
        match (term, &block.kind) {
            (TermDef::Spline { k, m, .. }, BlockKind::Spline { .. }) => {
                let core = difference_penalty(*k, *m);
                penalties.push(constrained_penalty(b, block, core, block.label.clone()));
            }
            (TermDef::Tensor { k, m, .. }, BlockKind::Tensor { .. }) => {
                let p0 = difference_penalty(k[0], *m);
                let p1 = difference_penalty(k[1], *m);
                // margin 1: P0 (x) I, margin 2: I (x) P1, in row-major
                // column order col = a * k1 + b
                let q = k[0] * k[1];
                let mut s0 = Array2::<f64>::zeros((q, q));
                let mut s1 = Array2::<f64>::zeros((q, q));
                for a in 0..k[0] {
                    for a2 in 0..k[0] {
                        for b2 in 0..k[1] {
                            s0[[a * k[1] + b2, a2 * k[1] + b2]] = p0[[a, a2]];
                        }
                    }
                }
                for b1 in 0..k[1] {
                    for b2 in 0..k[1] {
                        for a in 0..k[0] {
                            s1[[a * k[1] + b1, a * k[1] + b2]] = p1[[b1, b2]];
                        }
                    }
                }
                penalties.push(constrained_penalty(b, block, s0, format!("{}[1]", block.label)));
                penalties.push(constrained_penalty(b, block, s1, format!("{}[2]", block.label)));
            }
            (TermDef::Linear { .. }, BlockKind::Linear { .. })
            | (TermDef::Factor { .. }, BlockKind::Factor { .. }) => {}
            _ => unreachable!("terms and blocks walk in lockstep"),
        }
    }
    Ok(penalties)
}
