//! CSV datasets and tables, atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row} has {got} fields, expected {expected}")]
    Ragged {
        path: PathBuf,
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("{path}: row {row}, column {column}: `{cell}` is not a number")]
    NotNumeric {
        path: PathBuf,
        row: usize,
        column: usize,
        cell: String,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl IoError {
    pub(crate) fn fs(path: &Path, source: std::io::Error) -> Self {
        IoError::Fs {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Numeric CSV with the target in the last column. A first row that does not
/// parse as numbers is taken as a header. Row numbers in errors are 1-based
/// file lines.
pub fn load_csv_dataset(path: &Path) -> Result<(Tensor, Vec<f64>), IoError> {
    let (rows, width) = load_numeric_rows(path)?;
    if width < 2 {
        return Err(IoError::Format {
            path: path.to_path_buf(),
            detail: "need at least one feature column and a target column".into(),
        });
    }
    let d = width - 1;
    let mut x = Vec::with_capacity(rows.len() * d);
    let mut y = Vec::with_capacity(rows.len());
    for row in &rows {
        x.extend_from_slice(&row[..d]);
        y.push(row[d]);
    }
    Ok((Tensor::from_vec(rows.len(), d, x).expect("rectangular"), y))
}

/// Numeric CSV without a target column.
pub fn load_csv_matrix(path: &Path) -> Result<Tensor, IoError> {
    let (rows, width) = load_numeric_rows(path)?;
    let n = rows.len();
    Ok(Tensor::from_vec(n, width, rows.into_iter().flatten().collect()).expect("rectangular"))
}

fn load_numeric_rows(path: &Path) -> Result<(Vec<Vec<f64>>, usize), IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = i + 1;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<Result<f64, ()>> = record.iter().map(|c| c.parse::<f64>().map_err(|_| ())).collect();
        if i == 0 && parsed.iter().any(Result::is_err) {
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(IoError::Ragged {
                path: path.to_path_buf(),
                row: line,
                expected,
                got: record.len(),
            });
        }
        let mut values = Vec::with_capacity(expected);
        for (c, (cell, v)) in record.iter().zip(parsed).enumerate() {
            match v {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(IoError::NotNumeric {
                        path: path.to_path_buf(),
                        row: line,
                        column: c + 1,
                        cell: cell.to_string(),
                    })
                }
            }
        }
        rows.push(values);
    }
    Ok((rows, width.unwrap_or(0)))
}

fn csv_error(path: &Path, e: csv::Error) -> IoError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => IoError::fs(path, source),
        other => IoError::Format {
            path: path.to_path_buf(),
            detail: format!("{other:?}"),
        },
    }
}

/// Writes `header` then `rows` as CSV, atomically.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), IoError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        writer.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    let bytes = writer.into_inner().map_err(|e| IoError::fs(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| IoError::fs(&dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(IoError::fs(path, e));
    }
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::fs(path, e))
}
