//! Cross-validation fold schemes: which points are dropped together and
//! which points each fold predicts.
//!
//! A scheme has `alpha(k)` (the indices omitted when refitting fold `k`)
//! and `delta(k)` (the indices whose predictions fold `k` scores).
//! Leave-one-out and k-fold are special cases; general neighbourhood
//! schemes set `delta(i) = {i}` and build `alpha(i)` from pairwise rules
//! on row order, covariate distance, or grouping columns, combined with
//! `&` (intersection) and `|` (union).

use thiserror::Error;

use crate::data::{Column, DataError, DataTable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemeError {
    #[error("cannot parse rule {0:?}: {1}")]
    Parse(String, String),
    #[error("invalid scheme: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Pairwise membership rule for neighbourhood construction.
#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    /// `|i - j| <= w` on row order.
    Window { w: usize },
    /// The `k` nearest rows by `|x_i - x_j|`; ties prefer lower index.
    KNearest { k: usize, col: String },
    /// Euclidean distance at most `d` in two coordinate columns.
    Radius { d: f64, cols: [String; 2] },
    /// Chebyshev (max-coordinate) distance at most `d`.
    Square { d: f64, cols: [String; 2] },
    /// Same value (or factor level) in a column.
    Same { col: String },
    And(Vec<Rule>),
    Or(Vec<Rule>),
}

impl Rule {
    /// Parses `atom ('&' atom)* ('|' conjunction)*`, e.g.
    /// `"window:4"`, `"knearest:5:x"`, `"radius:0.3:x:y&same:region"`.
    pub fn parse(text: &str) -> Result<Rule, SchemeError> {
        let mut terms = Vec::new();
        for term in text.split('|') {
            let mut atoms = Vec::new();
            for atom in term.split('&') {
                atoms.push(Self::parse_atom(atom.trim(), text)?);
            }
            terms.push(if atoms.len() == 1 { atoms.pop().unwrap() } else { Rule::And(atoms) });
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Rule::Or(terms) })
    }

    fn parse_atom(atom: &str, whole: &str) -> Result<Rule, SchemeError> {
        let err = |msg: &str| SchemeError::Parse(whole.to_owned(), format!("{atom:?}: {msg}"));
        let mut parts = atom.split(':');
        let head = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        match (head, rest.as_slice()) {
            ("window", [w]) => {
                let w = w.parse().map_err(|_| err("window size must be an integer"))?;
                Ok(Rule::Window { w })
            }
            ("knearest", [k, col]) => {
                let k = k.parse().map_err(|_| err("neighbour count must be an integer"))?;
                Ok(Rule::KNearest { k, col: (*col).to_owned() })
            }
            ("radius", [d, cx, cy]) | ("square", [d, cx, cy]) => {
                let d: f64 = d.parse().map_err(|_| err("distance must be numeric"))?;
                if !(d >= 0.0) {
                    return Err(err("distance must be nonnegative"));
                }
                let cols = [(*cx).to_owned(), (*cy).to_owned()];
                Ok(if head == "radius" { Rule::Radius { d, cols } } else { Rule::Square { d, cols } })
            }
            ("same", [col]) => Ok(Rule::Same { col: (*col).to_owned() }),
            _ => Err(err("expected window:w, knearest:k:col, radius:d:x:y, square:d:x:y or same:col")),
        }
    }

    /// Neighbour sets under this rule, one sorted list per row (self not
    /// guaranteed to be present; callers add it).
    fn neighbours(&self, data: &DataTable) -> Result<Vec<Vec<usize>>, SchemeError> {
        let n = data.n();
        match self {
            Rule::Window { w } => Ok((0..n)
                .map(|i| (i.saturating_sub(*w)..=(i + w).min(n.saturating_sub(1))).collect())
                .collect()),
            Rule::KNearest { k, col } => {
                let xs = data.numeric(col)?;
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let mut order: Vec<usize> = (0..n).filter(|j| *j != i).collect();
                    order.sort_by(|&a, &b| {
                        (xs[a] - xs[i])
                            .abs()
                            .total_cmp(&(xs[b] - xs[i]).abs())
                            .then(a.cmp(&b))
                    });
                    order.truncate(*k);
                    order.sort_unstable();
                    out.push(order);
                }
                Ok(out)
            }
            Rule::Radius { d, cols } | Rule::Square { d, cols } => {
                let xs = data.numeric(&cols[0])?;
                let ys = data.numeric(&cols[1])?;
                let chebyshev = matches!(self, Rule::Square { .. });
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let mut nb = Vec::new();
                    for j in 0..n {
                        let (dx, dy) = ((xs[j] - xs[i]).abs(), (ys[j] - ys[i]).abs());
                        let inside = if chebyshev {
                            dx <= *d && dy <= *d
                        } else {
                            dx * dx + dy * dy <= d * d
                        };
                        if inside {
                            nb.push(j);
                        }
                    }
                    out.push(nb);
                }
                Ok(out)
            }
            Rule::Same { col } => {
                let key: Vec<u64> = match data.column(col)? {
                    Column::Factor { codes, .. } => codes.iter().map(|c| *c as u64).collect(),
                    Column::Numeric(v) => v.iter().map(|x| x.to_bits()).collect(),
                };
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    out.push((0..n).filter(|&j| key[j] == key[i]).collect());
                }
                Ok(out)
            }
            Rule::And(rules) => {
                let mut sets = rules.iter().map(|r| r.neighbours(data));
                let mut acc = sets.next().expect("parser never builds empty And")?;
                for s in sets {
                    let s = s?;
                    for (a, b) in acc.iter_mut().zip(&s) {
                        a.retain(|j| b.binary_search(j).is_ok());
                    }
                }
                Ok(acc)
            }
            Rule::Or(rules) => {
                let mut sets = rules.iter().map(|r| r.neighbours(data));
                let mut acc = sets.next().expect("parser never builds empty Or")?;
                for s in sets {
                    let s = s?;
                    for (a, b) in acc.iter_mut().zip(&s) {
                        a.extend_from_slice(b);
                        a.sort_unstable();
                        a.dedup();
                    }
                }
                Ok(acc)
            }
        }
    }
}

/// How folds are generated.
#[derive(Debug, Clone, PartialEq)]
pub enum SchemeKind {
    /// One fold per datum, `alpha(i) = delta(i) = {i}`.
    Loo,
    /// Contiguous blocks of roughly equal size.
    KFold(usize),
    /// One fold per datum, `alpha(i)` from a rule, `delta(i) = {i}`.
    Neighbourhood(Rule),
}

/// Materialized folds over a concrete data set.
#[derive(Debug, Clone)]
pub struct NeighbourhoodScheme {
    /// Indices omitted when refitting fold `k` (sorted).
    pub alpha: Vec<Vec<usize>>,
    /// Indices scored by fold `k` (sorted).
    pub delta: Vec<Vec<usize>>,
    /// Fold containing each datum.
    pub fold_of: Vec<usize>,
    /// True when `j in alpha(fold_of(i)) <=> i in alpha(fold_of(j))`.
    pub symmetric: bool,
    pub label: String,
}

impl NeighbourhoodScheme {
    pub fn folds(&self) -> usize {
        self.alpha.len()
    }

    /// Omitted set of the fold that scores datum `i`.
    pub fn datum_alpha(&self, i: usize) -> &[usize] {
        &self.alpha[self.fold_of[i]]
    }

    /// Largest omitted-set size.
    pub fn max_alpha(&self) -> usize {
        self.alpha.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Builds the folds of a scheme over `data`.
pub fn make_scheme(kind: &SchemeKind, data: &DataTable) -> Result<NeighbourhoodScheme, SchemeError> {
    let n = data.n();
    if n == 0 {
        return Err(SchemeError::Invalid("empty data".into()));
    }
    let (alpha, delta, fold_of, label) = match kind {
        SchemeKind::Loo => {
            let singles: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
            (singles.clone(), singles, (0..n).collect(), "loo".to_owned())
        }
        SchemeKind::KFold(m) => {
            let m = *m;
            if m < 2 || m > n {
                return Err(SchemeError::Invalid(format!("kfold needs 2 <= folds <= n, got {m}")));
            }
            let mut alpha = Vec::with_capacity(m);
            let mut fold_of = vec![0usize; n];
            for t in 0..m {
                let (lo, hi) = (t * n / m, (t + 1) * n / m);
                for f in fold_of.iter_mut().take(hi).skip(lo) {
                    *f = t;
                }
                alpha.push((lo..hi).collect());
            }
            (alpha.clone(), alpha, fold_of, format!("kfold:{m}"))
        }
        SchemeKind::Neighbourhood(rule) => {
            let mut alpha = rule.neighbours(data)?;
            for (i, set) in alpha.iter_mut().enumerate() {
                if set.binary_search(&i).is_err() {
                    set.push(i);
                    set.sort_unstable();
                }
            }
            let delta: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
            (alpha, delta, (0..n).collect(), format!("nei[{rule:?}]"))
        }
    };
    let mut scheme = NeighbourhoodScheme { alpha, delta, fold_of, symmetric: false, label };
    scheme.symmetric = (0..n).all(|i| {
        scheme.datum_alpha(i).iter().all(|&j| scheme.datum_alpha(j).binary_search(&i).is_ok())
    });
    Ok(scheme)
}
