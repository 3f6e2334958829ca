//! CSV matrix input and output.
//!
//! Files are RFC-4180 with `.` as the decimal separator. A first row that does
//! not parse as numbers is treated as a header and skipped.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{invalid, Result};

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(invalid(format!("{}: row {} is not numeric: {e}", path.display(), i + 1)));
            }
        }
    }
    if rows.is_empty() {
        return Err(invalid(format!("{}: no numeric rows", path.display())));
    }
    let cols = rows[0].len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(invalid(format!("{}: row {} has {} fields, expected {cols}", path.display(), i + 1, r.len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid(format!("{}: contains NaN or infinite entries", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
