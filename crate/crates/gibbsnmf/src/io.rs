//! Tab-separated matrix files with row labels and column names, plus atomic
//! writes. Values are serialized in shortest round-trip form, so reading a
//! written file reproduces every float bit-exactly.

use ndarray::Array2;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{data_err, Result};

/// A matrix with one label per row and one name per column, as stored on
/// disk: a header line of column names after the label heading, then one
/// labeled row per line.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub row_labels: Vec<String>,
    pub col_names: Vec<String>,
    pub values: Array2<f64>,
}

impl LabeledMatrix {
    pub fn new(
        row_labels: Vec<String>,
        col_names: Vec<String>,
        values: Array2<f64>,
    ) -> Result<Self> {
        if row_labels.len() != values.nrows() || col_names.len() != values.ncols() {
            return Err(data_err("matrix dimensions disagree with its labels"));
        }
        Ok(LabeledMatrix { row_labels, col_names, values })
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| data_err("matrix file is empty"))?;
        let mut col_names: Vec<String> = header.split('\t').map(str::to_string).collect();
        if col_names.len() < 2 {
            return Err(data_err("matrix header needs a label column and at least one value column"));
        }
        col_names.remove(0); // the label column's own heading
        let mut row_labels = Vec::new();
        let mut cells: Vec<f64> = Vec::new();
        for (lineno, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            row_labels.push(
                fields
                    .next()
                    .ok_or_else(|| data_err(format!("line {}: missing label", lineno + 1)))?
                    .to_string(),
            );
            let mut got = 0;
            for field in fields {
                cells.push(field.parse::<f64>().map_err(|_| {
                    data_err(format!("line {}, column {}: {field:?} is not a number", lineno + 1, got + 2))
                })?);
                got += 1;
            }
            if got != col_names.len() {
                return Err(data_err(format!(
                    "line {}: expected {} values, found {got}",
                    lineno + 1,
                    col_names.len()
                )));
            }
        }
        let values = Array2::from_shape_vec((row_labels.len(), col_names.len()), cells)
            .map_err(|e| data_err(format!("matrix shape: {e}")))?;
        LabeledMatrix::new(row_labels, col_names, values)
    }

    /// Serialize with the given heading over the label column. Floats print
    /// in shortest round-trip form (at least 12 significant digits whenever
    /// that many are needed).
    pub fn to_tsv(&self, corner: &str) -> String {
        let mut out = String::from(corner);
        for name in &self.col_names {
            let _ = write!(out, "\t{name}");
        }
        out.push('\n');
        for (i, label) in self.row_labels.iter().enumerate() {
            let _ = write!(out, "{label}");
            for j in 0..self.col_names.len() {
                let _ = write!(out, "\t{}", self.values[(i, j)]);
            }
            out.push('\n');
        }
        out
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>, corner: &str) -> Result<()> {
        atomic_write(path, &self.to_tsv(corner))
    }
}

/// Write a file atomically: the content lands in a temporary file in the
/// destination directory and is renamed into place, so readers never observe
/// a partial file.
pub fn atomic_write(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.persist(path).map_err(|e| crate::error::Error::Io(e.error))?;
    Ok(())
}
