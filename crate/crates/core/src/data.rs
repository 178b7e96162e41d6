//! Minimal column table consumed by the model builder. Columns are either
//! numeric or factors (string levels mapped to dense codes in sorted order).

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("column {0:?} not found")]
    MissingColumn(String),
    #[error("column {0:?} is not numeric")]
    NotNumeric(String),
    #[error("column {0:?} is not a factor")]
    NotFactor(String),
    #[error("column {name:?} has length {got}, table has {expected} rows")]
    LengthMismatch { name: String, expected: usize, got: usize },
}

#[derive(Debug, Clone)]
pub enum Column {
    Numeric(Vec<f64>),
    /// Sorted unique levels plus a per-row index into them.
    Factor { levels: Vec<String>, codes: Vec<usize> },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Factor { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds a factor column from raw string values.
    pub fn factor_from_strings<S: AsRef<str>>(values: &[S]) -> Column {
        let mut levels: Vec<String> = values.iter().map(|s| s.as_ref().to_owned()).collect();
        levels.sort();
        levels.dedup();
        let codes = values
            .iter()
            .map(|s| levels.binary_search_by(|l| l.as_str().cmp(s.as_ref())).expect("level present"))
            .collect();
        Column::Factor { levels, codes }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DataTable {
    n: usize,
    columns: Vec<(String, Column)>,
}

impl DataTable {
    pub fn new() -> Self {
        DataTable { n: 0, columns: Vec::new() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, name: &str, col: Column) -> Result<(), DataError> {
        if self.columns.is_empty() {
            self.n = col.len();
        } else if col.len() != self.n {
            return Err(DataError::LengthMismatch {
                name: name.to_owned(),
                expected: self.n,
                got: col.len(),
            });
        }
        self.columns.push((name.to_owned(), col));
        Ok(())
    }

    pub fn push_numeric(&mut self, name: &str, values: Vec<f64>) -> Result<(), DataError> {
        self.push(name, Column::Numeric(values))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    pub fn column(&self, name: &str) -> Result<&Column, DataError> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c)
            .ok_or_else(|| DataError::MissingColumn(name.to_owned()))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64], DataError> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Factor { .. } => Err(DataError::NotNumeric(name.to_owned())),
        }
    }

    pub fn factor(&self, name: &str) -> Result<(&[String], &[usize]), DataError> {
        match self.column(name)? {
            Column::Factor { levels, codes } => Ok((levels, codes)),
            Column::Numeric(_) => Err(DataError::NotFactor(name.to_owned())),
        }
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (the common "type 7" definition: `h = (n - 1) tau`).
pub fn quantile_type7(xs: &[f64], tau: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of empty sample");
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * tau.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_levels_are_sorted_and_deduped() {
        let c = Column::factor_from_strings(&["b", "a", "b", "c"]);
        match &c {
            Column::Factor { levels, codes } => {
                assert_eq!(levels, &["a", "b", "c"]);
                assert_eq!(codes, &[1, 0, 1, 2]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn quantile_interpolates_order_statistics() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile_type7(&xs, 0.0), 1.0);
        assert_eq!(quantile_type7(&xs, 1.0), 4.0);
        assert_eq!(quantile_type7(&xs, 0.5), 2.5);
        assert_eq!(quantile_type7(&xs, 1.0 / 3.0), 2.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut t = DataTable::new();
        t.push_numeric("x", vec![1.0, 2.0]).unwrap();
        assert!(t.push_numeric("y", vec![1.0]).is_err());
        assert_eq!(t.n(), 2);
        assert!(t.numeric("x").is_ok());
        assert!(t.numeric("z").is_err());
    }
}
