//! Deterministic output files: CSV with a header row, 17 significant digits
//! and LF line endings, plus SHA-256 digests for the manifest.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::CliError;

/// A float with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// An in-memory CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|&x| fmt_float(x)))?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.into_error()))
    }
}

/// Reads a numeric CSV with a header row; returns the header and the columns.
pub fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::Input(format!("{}: row {}: \"{field}\" is not a number", path.display(), i + 2))
            })?;
            cols[j].push(v);
        }
    }
    Ok((header, cols))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}
