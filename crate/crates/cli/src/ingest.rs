//! CSV ingestion: RFC-4180 files with a header row become data tables.
//! A column whose every field parses as a float is numeric; anything
//! else becomes a factor. Empty fields are errors (no missing-value
//! handling), reported with their line number.

use std::path::{Path, PathBuf};

use thiserror::Error;

use ncv_core::{Column, DataError, DataTable};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: no data rows")]
    Empty { path: PathBuf },
    #[error("{path}, line {line}: empty field in column {column:?}")]
    EmptyField { path: PathBuf, line: u64, column: String },
    #[error("{path}: {source}")]
    Table {
        path: PathBuf,
        #[source]
        source: DataError,
    },
}

pub fn read_csv(path: &Path) -> Result<DataTable, IngestError> {
    let file = std::fs::File::open(path)
        .map_err(|source| IngestError::Io { path: path.to_owned(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|source| IngestError::Csv { path: path.to_owned(), source })?
        .iter()
        .map(str::to_owned)
        .collect();

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for record in reader.records() {
        // unequal field counts surface here as csv errors with positions
        let record = record.map_err(|source| IngestError::Csv { path: path.to_owned(), source })?;
        let line = record.position().map_or(0, |p| p.line());
        for (j, field) in record.iter().enumerate() {
            if field.is_empty() {
                return Err(IngestError::EmptyField {
                    path: path.to_owned(),
                    line,
                    column: headers[j].clone(),
                });
            }
            cells[j].push(field.to_owned());
        }
    }
    if cells.first().is_none_or(|c| c.is_empty()) {
        return Err(IngestError::Empty { path: path.to_owned() });
    }

    let mut table = DataTable::new();
    for (name, values) in headers.iter().zip(cells) {
        let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse::<f64>().ok()).collect();
        let column = match numeric {
            Some(nums) => Column::Numeric(nums),
            None => Column::factor_from_strings(&values),
        };
        table
            .push(name, column)
            .map_err(|source| IngestError::Table { path: path.to_owned(), source })?;
    }
    Ok(table)
}

/// Writes a table back out (simulation artifacts). Numeric values use
/// the shortest round-trip float format.
pub fn write_csv(path: &Path, table: &DataTable) -> Result<(), IngestError> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|source| IngestError::Csv { path: path.to_owned(), source })?;
    let names: Vec<&str> = table.names().collect();
    writer
        .write_record(&names)
        .map_err(|source| IngestError::Csv { path: path.to_owned(), source })?;
    for i in 0..table.n() {
        let mut row = Vec::with_capacity(names.len());
        for name in &names {
            let cell = match table.column(name).expect("own column") {
                Column::Numeric(v) => v[i].to_string(),
                Column::Factor { levels, codes } => levels[codes[i]].clone(),
            };
            row.push(cell);
        }
        writer
            .write_record(&row)
            .map_err(|source| IngestError::Csv { path: path.to_owned(), source })?;
    }
    writer.flush().map_err(|source| IngestError::Io { path: path.to_owned(), source })?;
    Ok(())
}
