//! On-disk dataset layout.
//!
//! ```text
//! <data-dir>/labels.csv          subject_id,score[,covariate...]
//! <data-dir>/subjects/<id>.csv   N x T time series or N x N connectivity matrix
//! <data-dir>/rois.csv            optional roi_id,label
//! <dir>/graphs.jsonl             graph store written by build-graphs
//! ```
//!
//! Matrix files may start with a header row, detected by any non-numeric cell.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariates::CovariateColumn;
use crate::fnc_graph::{pearson_fnc, Edge, FncError, FncGraph, FncMatrix, TimeSeries};

pub const LABELS_FILE: &str = "labels.csv";
pub const SUBJECTS_DIR: &str = "subjects";
pub const ROIS_FILE: &str = "rois.csv";
pub const GRAPHS_FILE: &str = "graphs.jsonl";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Fnc { path: PathBuf, source: FncError },
    #[error("{path} line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("labels have no column `{0}`")]
    MissingColumn(String),
    #[error("subject `{0}` has no graph in the store")]
    MissingGraph(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DataError + '_ {
    move |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a numeric matrix, skipping a leading header row if present.
pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err(path))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err(path))?;
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if line == 0 => continue,
            Err(e) => return Err(format_err(path, format!("row {}: {e}", line + 1))),
        }
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(format_err(path, "no numeric rows"));
    }
    if let Some(r) = rows.iter().position(|r| r.len() != cols) {
        return Err(format_err(path, format!("row {} has {} values, expected {cols}", r + 1, rows[r].len())));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((flat.len() / cols, cols), flat).expect("rectangular"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixKind {
    TimeSeries,
    Connectivity,
}

/// A square, symmetric matrix with unit diagonal and entries in `[-1, 1]` is
/// taken as connectivity; anything else as regions x samples.
pub fn detect_kind(m: &Array2<f64>) -> MatrixKind {
    let n = m.nrows();
    if n != m.ncols() {
        return MatrixKind::TimeSeries;
    }
    for i in 0..n {
        if (m[[i, i]] - 1.0).abs() > 1e-9 {
            return MatrixKind::TimeSeries;
        }
        for j in 0..n {
            if (m[[i, j]] - m[[j, i]]).abs() > 1e-9 || m[[i, j]].abs() > 1.0 + 1e-9 {
                return MatrixKind::TimeSeries;
            }
        }
    }
    MatrixKind::Connectivity
}

/// Connectivity of one subject file, computed from a time series if needed.
pub fn load_subject_fnc(path: &Path) -> Result<FncMatrix<f64>, DataError> {
    let m = read_matrix_csv(path)?;
    let fnc_err = |source| DataError::Fnc {
        path: path.to_path_buf(),
        source,
    };
    match detect_kind(&m) {
        MatrixKind::Connectivity => FncMatrix::new(m).map_err(fnc_err),
        MatrixKind::TimeSeries => {
            let ts = TimeSeries::from_values(m).map_err(fnc_err)?;
            pearson_fnc(&ts).map_err(fnc_err)
        }
    }
}

/// Writes values with 6 decimals, rows as lines, no header.
pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut line = String::new();
    for row in m.rows() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v:.6}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// `labels.csv` contents: one row per subject, string cells by column.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTable {
    pub subject_ids: Vec<String>,
    pub columns: Vec<(String, Vec<String>)>,
}

impl LabelTable {
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(csv_err(path))?;
        let headers: Vec<String> = reader.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
        let id_col = headers
            .iter()
            .position(|h| h == "subject_id")
            .ok_or_else(|| format_err(path, "missing subject_id column"))?;
        let mut subject_ids = Vec::new();
        let mut columns: Vec<(String, Vec<String>)> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != id_col)
            .map(|(_, h)| (h.clone(), Vec::new()))
            .collect();
        for record in reader.records() {
            let record = record.map_err(csv_err(path))?;
            let mut c = 0;
            for (i, cell) in record.iter().enumerate() {
                if i == id_col {
                    subject_ids.push(cell.to_string());
                } else {
                    columns[c].1.push(cell.to_string());
                    c += 1;
                }
            }
        }
        Ok(Self { subject_ids, columns })
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
        let mut header = vec!["subject_id".to_string()];
        header.extend(self.columns.iter().map(|c| c.0.clone()));
        w.write_record(&header).map_err(csv_err(path))?;
        for (r, id) in self.subject_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(self.columns.iter().map(|c| c.1[r].clone()));
            w.write_record(&row).map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn column(&self, name: &str) -> Option<&[String]> {
        self.columns.iter().find(|c| c.0 == name).map(|c| c.1.as_slice())
    }

    pub fn numeric(&self, name: &str) -> Result<Vec<f64>, DataError> {
        let col = self.column(name).ok_or_else(|| DataError::MissingColumn(name.to_string()))?;
        col.iter()
            .enumerate()
            .map(|(r, v)| {
                v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| DataError::Format {
                    path: PathBuf::from(LABELS_FILE),
                    message: format!("column `{name}` row {}: `{v}` is not a finite number", r + 1),
                })
            })
            .collect()
    }

    /// Covariates: the named columns, or every column except the target.
    pub fn covariates(&self, target: &str, names: Option<&[String]>) -> Result<Vec<CovariateColumn>, DataError> {
        let chosen: Vec<String> = match names {
            Some(n) => n.to_vec(),
            None => self.columns.iter().map(|c| c.0.clone()).filter(|c| c != target).collect(),
        };
        chosen
            .into_iter()
            .map(|n| {
                self.column(&n)
                    .map(|v| CovariateColumn::new(n.clone(), v.to_vec()))
                    .ok_or(DataError::MissingColumn(n))
            })
            .collect()
    }
}

/// ROI labels indexed by id; ids missing from the file render as `roi_<id>`.
pub fn read_roi_labels(path: &Path, n_rois: usize) -> Result<Vec<String>, DataError> {
    let mut labels: Vec<String> = (0..n_rois).map(|i| format!("roi_{i}")).collect();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err(path))?;
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        let id: usize = record
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format_err(path, "roi_id must be a non-negative integer"))?;
        if let (Some(slot), Some(label)) = (labels.get_mut(id), record.get(1)) {
            *slot = label.to_string();
        }
    }
    Ok(labels)
}

pub fn write_roi_labels(path: &Path, labels: &[String]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["roi_id", "label"]).map_err(csv_err(path))?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.clone()]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Serialized form of one [`FncGraph`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub subject_id: String,
    pub n_rois: usize,
    pub roi_ids: Vec<usize>,
    pub node_features: Vec<Vec<f64>>,
    /// `(src, dst, weight)`.
    pub edges: Vec<(usize, usize, f64)>,
    pub label: f64,
}

impl GraphRecord {
    pub fn from_graph(subject_id: &str, g: &FncGraph<f64>) -> Self {
        Self {
            subject_id: subject_id.to_string(),
            n_rois: g.n_rois,
            roi_ids: g.roi_ids.clone(),
            node_features: g.node_features.rows().into_iter().map(|r| r.to_vec()).collect(),
            edges: g.edges.iter().map(|e| (e.src, e.dst, e.weight)).collect(),
            label: g.label,
        }
    }

    pub fn to_graph(&self) -> Result<FncGraph<f64>, String> {
        let n = self.node_features.len();
        let cols = self.node_features.first().map_or(0, Vec::len);
        if self.node_features.iter().any(|r| r.len() != cols) || self.roi_ids.len() != n {
            return Err(format!("graph `{}` has inconsistent shapes", self.subject_id));
        }
        if let Some(e) = self.edges.iter().find(|e| e.0 >= n || e.1 >= n || e.0 == e.1) {
            return Err(format!("graph `{}` has invalid edge {:?}", self.subject_id, e));
        }
        let flat: Vec<f64> = self.node_features.iter().flatten().copied().collect();
        Ok(FncGraph {
            node_features: Array2::from_shape_vec((n, cols), flat).expect("checked"),
            edges: self
                .edges
                .iter()
                .map(|&(src, dst, weight)| Edge { src, dst, weight })
                .collect(),
            roi_ids: self.roi_ids.clone(),
            n_rois: self.n_rois,
            label: self.label,
        })
    }
}

pub fn write_graphs(path: &Path, records: &[GraphRecord]) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for (line, r) in records.iter().enumerate() {
        serde_json::to_writer(&mut w, r).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            line: line + 1,
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_graphs(path: &Path) -> Result<Vec<GraphRecord>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Subject connectivity matrices in label-table order.
pub fn load_subject_fncs(data_dir: &Path, labels: &LabelTable) -> Result<Vec<FncMatrix<f64>>, DataError> {
    use rayon::prelude::*;
    labels
        .subject_ids
        .par_iter()
        .map(|id| load_subject_fnc(&data_dir.join(SUBJECTS_DIR).join(format!("{id}.csv"))))
        .collect()
}

/// Graphs from a store, reordered to match `labels`.
pub fn graphs_for_labels(records: Vec<GraphRecord>, labels: &LabelTable) -> Result<Vec<FncGraph<f64>>, DataError> {
    let mut by_id: BTreeMap<String, GraphRecord> = records.into_iter().map(|r| (r.subject_id.clone(), r)).collect();
    labels
        .subject_ids
        .iter()
        .map(|id| {
            let r = by_id.remove(id).ok_or_else(|| DataError::MissingGraph(id.clone()))?;
            r.to_graph().map_err(|m| format_err(Path::new(GRAPHS_FILE), m))
        })
        .collect()
}

pub fn ensure_dir(path: &Path) -> Result<(), DataError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        line: 0,
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        line: 0,
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matrix_roundtrip_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "a,b,c\n1,2,3\n4,5,6\n").unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        fs::write(&p, "1,2,3\n4,5,6\n").unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap().nrows(), 2);
        fs::write(&p, "1,2,3\n4,x,6\n").unwrap();
        assert!(read_matrix_csv(&p).is_err());
        fs::write(&p, "1,2,3\n4,5\n").unwrap();
        assert!(read_matrix_csv(&p).is_err());
    }

    #[test]
    fn kind_detection() {
        assert_eq!(detect_kind(&array![[1.0, 0.2], [0.2, 1.0]]), MatrixKind::Connectivity);
        assert_eq!(detect_kind(&array![[1.0, 0.2], [0.3, 1.0]]), MatrixKind::TimeSeries);
        assert_eq!(detect_kind(&array![[1.0, 0.2, 0.4], [0.2, 1.0, 0.1]]), MatrixKind::TimeSeries);
    }

    #[test]
    fn labels_and_covariates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        fs::write(&p, "subject_id,score,age,site\na,1.5,9.0,site0\nb,2.0,10.0,site1\n").unwrap();
        let t = LabelTable::read(&p).unwrap();
        assert_eq!(t.subject_ids, vec!["a", "b"]);
        assert_eq!(t.numeric("score").unwrap(), vec![1.5, 2.0]);
        let cov = t.covariates("score", None).unwrap();
        assert_eq!(cov.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), vec!["age", "site"]);
        assert!(matches!(t.numeric("iq"), Err(DataError::MissingColumn(_))));
        let q = dir.path().join("copy.csv");
        t.write(&q).unwrap();
        assert_eq!(LabelTable::read(&q).unwrap(), t);
    }

    #[test]
    fn roi_labels_with_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rois.csv");
        fs::write(&p, "roi_id,label\n1,Insula\n").unwrap();
        assert_eq!(read_roi_labels(&p, 3).unwrap(), vec!["roi_0", "Insula", "roi_2"]);
    }

    #[test]
    fn graph_store_roundtrip() {
        let fnc = FncMatrix::new(array![[1.0, 0.3, -0.1], [0.3, 1.0, 0.7], [-0.1, 0.7, 1.0]]).unwrap();
        let g = crate::fnc_graph::build_graph(&fnc, 1.0, 2.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(GRAPHS_FILE);
        write_graphs(&p, &[GraphRecord::from_graph("s1", &g)]).unwrap();
        let back = read_graphs(&p).unwrap();
        assert_eq!(back[0].to_graph().unwrap(), g);
    }
}
