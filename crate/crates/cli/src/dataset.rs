//! Delimited-text input.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, Result};

/// Response and the two raw feature blocks, in file row order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub x1: DMatrix<f64>,
    pub x2: DMatrix<f64>,
    pub group1: Vec<String>,
    pub group2: Vec<String>,
}

/// Rejects overlapping groups, a response inside a group, and repeated names.
pub fn check_groups(response: &str, group1: &[String], group2: &[String]) -> Result<()> {
    if group1.is_empty() || group2.is_empty() {
        return Err(CliError::Usage(
            "both --group1 and --group2 need at least one column".into(),
        ));
    }
    let first: HashSet<&str> = group1.iter().map(String::as_str).collect();
    if let Some(shared) = group2.iter().find(|c| first.contains(c.as_str())) {
        return Err(CliError::Usage(format!("column `{shared}` appears in both groups")));
    }
    if let Some(c) = group1.iter().chain(group2).find(|c| c.as_str() == response) {
        return Err(CliError::Usage(format!(
            "response column `{c}` cannot also be a feature"
        )));
    }
    for group in [group1, group2] {
        let mut seen = HashSet::new();
        if let Some(dup) = group.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(CliError::Usage(format!("column `{dup}` is listed twice")));
        }
    }
    Ok(())
}

/// Reads a CSV file with a header row. Rows are numbered from 1, excluding the header.
pub fn load_dataset(path: &Path, response: &str, group1: &[String], group2: &[String]) -> Result<Dataset> {
    check_groups(response, group1, group2)?;
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(CliError::Data(format!("{}: file is empty", path.display())));
    }
    let index_of = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| {
            let available: Vec<&str> = header.iter().collect();
            CliError::Data(format!(
                "column `{name}` not found; available columns: {}",
                available.join(", ")
            ))
        })
    };
    let y_col = index_of(response)?;
    let g1 = group1.iter().map(|c| index_of(c)).collect::<Result<Vec<_>>>()?;
    let g2 = group2.iter().map(|c| index_of(c)).collect::<Result<Vec<_>>>()?;

    let mut y = Vec::new();
    let mut x1 = Vec::new();
    let mut x2 = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| CliError::Data(format!("row {row}: {e}")))?;
        let cell = |col: usize| -> Result<f64> {
            let name = &header[col];
            let raw = record.get(col).unwrap_or("");
            if raw.is_empty() {
                return Err(CliError::Data(format!("row {row}, column {name}: missing value")));
            }
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(CliError::Data(format!(
                    "row {row}, column {name}: non-numeric value `{raw}`"
                ))),
            }
        };
        y.push(cell(y_col)?);
        for &c in &g1 {
            x1.push(cell(c)?);
        }
        for &c in &g2 {
            x2.push(cell(c)?);
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    Ok(Dataset {
        y: DVector::from_vec(y),
        x1: DMatrix::from_row_slice(n, g1.len(), &x1),
        x2: DMatrix::from_row_slice(n, g2.len(), &x2),
        group1: group1.to_vec(),
        group2: group2.to_vec(),
    })
}
