//! Raw signal ingestion: CSV sequences, dataset manifests, temporal
//! subsampling and row-wise fusion of modalities.
//!
//! A signal file stores one time sample per line (loggers append samples),
//! so loading transposes it into a matrix with one row per scalar signal.

use serde::Deserialize;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum SignalError {
    #[error("MissingFile: {path}")]
    MissingFile { path: String },
    #[error("EmptyFile: {path} has a header but no data rows")]
    EmptyFile { path: String },
    #[error("RaggedRows: {path} line {line} has {found} columns, expected {expected}")]
    RaggedRows {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("NonNumericCell: {path} line {line} column {column}: {cell:?}")]
    NonNumericCell {
        path: String,
        line: usize,
        column: usize,
        cell: String,
    },
    #[error("DuplicateSignalName: {path} header repeats {name:?}")]
    DuplicateSignalName { path: String, name: String },
    #[error("MalformedRecord: {path} line {line}: {reason}")]
    MalformedRecord {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("DuplicatePath: {path} appears more than once in the manifest")]
    DuplicatePath { path: String },
    #[error("ColumnMismatch: cannot fuse {left} columns with {right} columns; subsample first")]
    ColumnMismatch { left: usize, right: usize },
    #[error("NameCollision: fused signal name {name:?} is not unique")]
    NameCollision { name: String },
    #[error("TargetTooLarge: target {target} exceeds {cols} available columns")]
    TargetTooLarge { target: usize, cols: usize },
    #[error("ZeroTarget: target column count must be at least 1")]
    ZeroTarget,
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SignalError>;

// ── SignalMatrix ─────────────────────────────────────────────────────────────

/// Multivariate sequence: row i is scalar signal i over time, column t is one
/// sample instant across all signals.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    /// `rows` per-signal sample vectors, all of equal length.
    values: Vec<Vec<f64>>,
    signal_names: Vec<String>,
    modality: String,
    /// Hz; 0 means unknown.
    sample_rate: f64,
}

impl SignalMatrix {
    pub fn new(
        values: Vec<Vec<f64>>,
        signal_names: Vec<String>,
        modality: impl Into<String>,
        sample_rate: f64,
    ) -> Self {
        assert!(!values.is_empty(), "signal matrix needs at least one row");
        let cols = values[0].len();
        assert!(cols >= 1, "signal matrix needs at least one column");
        assert!(
            values.iter().all(|r| r.len() == cols),
            "signal rows must share one length"
        );
        assert_eq!(values.len(), signal_names.len(), "one name per signal");
        SignalMatrix {
            values,
            signal_names,
            modality: modality.into(),
            sample_rate,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.values[0].len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn signal_names(&self) -> &[String] {
        &self.signal_names
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }
}

// ── CSV signal files ─────────────────────────────────────────────────────────

/// Loads a signal CSV: header of unique signal names, one time sample per
/// data row. The result is the transpose (signals as rows).
pub fn load_signal_csv(path: impl AsRef<Path>) -> Result<SignalMatrix> {
    let path = path.as_ref();
    let display = path.display().to_string();
    if !path.is_file() {
        return Err(SignalError::MissingFile { path: display });
    }
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| SignalError::EmptyFile {
        path: display.clone(),
    })?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let n = names.len();
    let mut seen = BTreeSet::new();
    for name in &names {
        if !seen.insert(name.clone()) {
            return Err(SignalError::DuplicateSignalName {
                path: display,
                name: name.clone(),
            });
        }
    }

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut data_rows = 0usize;
    for (line_idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n {
            return Err(SignalError::RaggedRows {
                path: display,
                line: line_idx + 1,
                expected: n,
                found: cells.len(),
            });
        }
        for (col, cell) in cells.iter().enumerate() {
            let trimmed = cell.trim();
            let v: f64 = trimmed.parse().map_err(|_| SignalError::NonNumericCell {
                path: display.clone(),
                line: line_idx + 1,
                column: col + 1,
                cell: trimmed.to_string(),
            })?;
            if !v.is_finite() {
                return Err(SignalError::NonNumericCell {
                    path: display,
                    line: line_idx + 1,
                    column: col + 1,
                    cell: trimmed.to_string(),
                });
            }
            values[col].push(v);
        }
        data_rows += 1;
    }
    if data_rows == 0 {
        return Err(SignalError::EmptyFile { path: display });
    }
    Ok(SignalMatrix::new(values, names, "unknown", 0.0))
}

/// Writes a matrix back to the CSV layout `load_signal_csv` reads. Float
/// formatting round-trips exactly.
pub fn write_signal_csv(s: &SignalMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    out.push_str(&s.signal_names().join(","));
    out.push('\n');
    for t in 0..s.cols() {
        for i in 0..s.rows() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", s.row(i)[t]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── Manifests ────────────────────────────────────────────────────────────────

/// One dataset sample: a signal file plus its label and provenance tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory at load time.
    pub path: PathBuf,
    pub label: String,
    pub subject: String,
    pub modality: String,
}

/// Ordered list of dataset samples, as loaded from a JSON-lines manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifestRecord {
    path: String,
    label: String,
    subject: String,
    modality: String,
}

/// Loads a manifest: one JSON object per non-empty line with exactly the keys
/// path, label, subject, modality. Relative paths resolve against the
/// manifest's directory; every path must point at an existing file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let display = path.display().to_string();
    if !path.is_file() {
        return Err(SignalError::MissingFile { path: display });
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let text = std::fs::read_to_string(path)?;

    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (line_idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RawManifestRecord =
            serde_json::from_str(line).map_err(|e| SignalError::MalformedRecord {
                path: display.clone(),
                line: line_idx + 1,
                reason: e.to_string(),
            })?;
        let resolved = if Path::new(&record.path).is_absolute() {
            PathBuf::from(&record.path)
        } else {
            base.join(&record.path)
        };
        if !seen.insert(resolved.clone()) {
            return Err(SignalError::DuplicatePath {
                path: resolved.display().to_string(),
            });
        }
        if !resolved.is_file() {
            return Err(SignalError::MissingFile {
                path: resolved.display().to_string(),
            });
        }
        entries.push(ManifestEntry {
            path: resolved,
            label: record.label,
            subject: record.subject,
            modality: record.modality,
        });
    }
    Ok(DatasetManifest { entries })
}

impl DatasetManifest {
    /// Distinct labels in ascending order.
    pub fn labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.label.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }
}

// ── Temporal subsampling and fusion ──────────────────────────────────────────

/// Keeps `target_cols` columns picked on a uniform index grid
/// (`round(j*(M-1)/(target_cols-1))`), preserving first and last columns.
/// Original measurements are kept verbatim; no interpolation.
pub fn subsample_time(s: &SignalMatrix, target_cols: usize) -> Result<SignalMatrix> {
    let m = s.cols();
    if target_cols == 0 {
        return Err(SignalError::ZeroTarget);
    }
    if target_cols > m {
        return Err(SignalError::TargetTooLarge {
            target: target_cols,
            cols: m,
        });
    }
    let picks: Vec<usize> = if target_cols == 1 {
        vec![0]
    } else {
        (0..target_cols)
            .map(|j| ((j * (m - 1)) as f64 / (target_cols - 1) as f64).round() as usize)
            .collect()
    };
    let values = s
        .values()
        .iter()
        .map(|row| picks.iter().map(|&c| row[c]).collect())
        .collect();
    Ok(SignalMatrix::new(
        values,
        s.signal_names().to_vec(),
        s.modality(),
        0.0,
    ))
}

/// Stacks the rows of `b` below the rows of `a`. Column counts must already
/// match; callers subsample the denser modality first. Signal names are
/// prefixed with their source modality to stay unique.
pub fn fuse_rows(a: &SignalMatrix, b: &SignalMatrix) -> Result<SignalMatrix> {
    if a.cols() != b.cols() {
        return Err(SignalError::ColumnMismatch {
            left: a.cols(),
            right: b.cols(),
        });
    }
    let mut values: Vec<Vec<f64>> = a.values().to_vec();
    values.extend(b.values().iter().cloned());

    let mut names = Vec::with_capacity(a.rows() + b.rows());
    for n in a.signal_names() {
        names.push(format!("{}:{}", a.modality(), n));
    }
    for n in b.signal_names() {
        names.push(format!("{}:{}", b.modality(), n));
    }
    let mut seen = BTreeSet::new();
    for name in &names {
        if !seen.insert(name.clone()) {
            return Err(SignalError::NameCollision { name: name.clone() });
        }
    }
    let rate = if a.sample_rate() == b.sample_rate() {
        a.sample_rate()
    } else {
        0.0
    };
    Ok(SignalMatrix::new(values, names, "fused", rate))
}
