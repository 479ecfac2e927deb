//! Ordinary least squares removal of nuisance covariates (age, site) from target scores.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative column norm below which a column counts as collinear with earlier ones.
const COLLINEAR_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovariateError {
    #[error("design matrix is rank deficient: column `{0}` is collinear with earlier columns")]
    RankDeficient(String),
    #[error("{rows} design rows but {scores} scores")]
    RowMismatch { rows: usize, scores: usize },
    #[error("covariate `{0}`: value `{1}` is not numeric")]
    NotNumeric(String, String),
    #[error("covariate `{name}` has {got} values, expected {expected}")]
    ColumnLength { name: String, got: usize, expected: usize },
    #[error("no rows to fit")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateKind {
    Numeric,
    /// One indicator per level after the first.
    Categorical { levels: Vec<String> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovariateColumn {
    pub name: String,
    pub values: Vec<String>,
}

impl CovariateColumn {
    pub fn new(name: impl Into<String>, values: Vec<String>) -> Self {
        Self {
            name: name.into(),
            values,
        }
    }

    pub fn numeric(name: impl Into<String>, values: &[f64]) -> Self {
        Self::new(name, values.iter().map(|v| format!("{v:?}")).collect())
    }

    /// Numeric if every value parses as a finite float, categorical otherwise.
    pub fn detect_kind(&self) -> CovariateKind {
        let numeric = self
            .values
            .iter()
            .all(|v| v.trim().parse::<f64>().map(f64::is_finite).unwrap_or(false));
        if numeric {
            CovariateKind::Numeric
        } else {
            let mut levels: Vec<String> = self.values.iter().map(|v| v.trim().to_string()).collect();
            levels.sort();
            levels.dedup();
            CovariateKind::Categorical { levels }
        }
    }
}

/// Column layout of a design matrix: intercept first, then each covariate's columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub covariates: Vec<(String, CovariateKind)>,
}

impl DesignSpec {
    pub fn detect(columns: &[CovariateColumn]) -> Self {
        Self {
            covariates: columns.iter().map(|c| (c.name.clone(), c.detect_kind())).collect(),
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["intercept".to_string()];
        for (name, kind) in &self.covariates {
            match kind {
                CovariateKind::Numeric => names.push(name.clone()),
                CovariateKind::Categorical { levels } => {
                    names.extend(levels.iter().skip(1).map(|l| format!("{name}={l}")));
                }
            }
        }
        names
    }

    /// Row-major design rows for `columns`; levels unseen at detection get all-zero indicators.
    pub fn design(&self, columns: &[CovariateColumn]) -> Result<Vec<Vec<f64>>, CovariateError> {
        let rows = columns.first().map_or(0, |c| c.values.len());
        for c in columns {
            if c.values.len() != rows {
                return Err(CovariateError::ColumnLength {
                    name: c.name.clone(),
                    got: c.values.len(),
                    expected: rows,
                });
            }
        }
        let mut out = vec![vec![1.0]; rows];
        for ((name, kind), col) in self.covariates.iter().zip(columns) {
            for (row, raw) in out.iter_mut().zip(&col.values) {
                let raw = raw.trim();
                match kind {
                    CovariateKind::Numeric => {
                        let v = raw
                            .parse::<f64>()
                            .map_err(|_| CovariateError::NotNumeric(name.clone(), raw.to_string()))?;
                        row.push(v);
                    }
                    CovariateKind::Categorical { levels } => {
                        row.extend(levels.iter().skip(1).map(|l| if l == raw { 1.0 } else { 0.0 }));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Fitted coefficients; columns dropped as collinear carry a zero coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateModel {
    pub spec: DesignSpec,
    pub coefficients: Vec<f64>,
    pub dropped: Vec<String>,
}

impl CovariateModel {
    pub fn residuals(&self, scores: &[f64], columns: &[CovariateColumn]) -> Result<Vec<f64>, CovariateError> {
        let x = self.spec.design(columns)?;
        apply(&x, &self.coefficients, scores)
    }
}

fn apply(x: &[Vec<f64>], beta: &[f64], scores: &[f64]) -> Result<Vec<f64>, CovariateError> {
    if x.len() != scores.len() {
        return Err(CovariateError::RowMismatch {
            rows: x.len(),
            scores: scores.len(),
        });
    }
    Ok(x
        .iter()
        .zip(scores)
        .map(|(row, &y)| y - row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>())
        .collect())
}

/// Least-squares coefficients via modified Gram-Schmidt.
///
/// Returns the coefficients and the indices of columns dropped as collinear;
/// in strict mode the first such column is an error instead.
pub fn ols(x: &[Vec<f64>], y: &[f64], names: &[String], strict: bool) -> Result<(Vec<f64>, Vec<usize>), CovariateError> {
    let n = x.len();
    if n == 0 {
        return Err(CovariateError::Empty);
    }
    if n != y.len() {
        return Err(CovariateError::RowMismatch { rows: n, scores: y.len() });
    }
    let p = x[0].len();
    // q holds orthonormal columns; r is upper triangular over the kept columns.
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut r: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut kept = Vec::with_capacity(p);
    let mut dropped = Vec::new();
    for j in 0..p {
        let mut v: Vec<f64> = x.iter().map(|row| row[j]).collect();
        let orig = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut coeffs = Vec::with_capacity(q.len());
        for qk in &q {
            let c: f64 = qk.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(qk) {
                *vi -= c * qi;
            }
            coeffs.push(c);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm <= COLLINEAR_TOL * orig.max(1.0) {
            if strict {
                return Err(CovariateError::RankDeficient(names.get(j).cloned().unwrap_or_else(|| format!("column {j}"))));
            }
            dropped.push(j);
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        coeffs.push(norm);
        q.push(v);
        r.push(coeffs);
        kept.push(j);
    }
    let qty: Vec<f64> = q.iter().map(|qk| qk.iter().zip(y).map(|(a, b)| a * b).sum()).collect();
    let m = kept.len();
    let mut beta_kept = vec![0.0; m];
    for i in (0..m).rev() {
        let mut s = qty[i];
        for k in i + 1..m {
            s -= r[k][i] * beta_kept[k];
        }
        beta_kept[i] = s / r[i][i];
    }
    let mut beta = vec![0.0; p];
    for (&j, &b) in kept.iter().zip(&beta_kept) {
        beta[j] = b;
    }
    Ok((beta, dropped))
}

/// Residuals of `scores` after an OLS fit on the design; a singular design is an error.
pub fn regress_covariates(scores: &[f64], design: &[Vec<f64>]) -> Result<Vec<f64>, CovariateError> {
    let p = design.first().map_or(0, Vec::len);
    let names: Vec<String> = (0..p).map(|j| format!("column {j}")).collect();
    let (beta, _) = ols(design, scores, &names, true)?;
    apply(design, &beta, scores)
}

/// Fits on the rows in `fit_rows`, dropping collinear columns with a warning.
pub fn fit(scores: &[f64], columns: &[CovariateColumn], fit_rows: &[usize]) -> Result<CovariateModel, CovariateError> {
    let spec = DesignSpec::detect(&subset(columns, fit_rows));
    let names = spec.column_names();
    let x = spec.design(&subset(columns, fit_rows))?;
    let y: Vec<f64> = fit_rows.iter().map(|&i| scores[i]).collect();
    let (coefficients, dropped) = ols(&x, &y, &names, false)?;
    let dropped: Vec<String> = dropped.into_iter().map(|j| names[j].clone()).collect();
    if !dropped.is_empty() {
        log::warn!("covariate design is rank deficient; dropped collinear columns {dropped:?}");
    }
    Ok(CovariateModel {
        spec,
        coefficients,
        dropped,
    })
}

pub fn subset(columns: &[CovariateColumn], rows: &[usize]) -> Vec<CovariateColumn> {
    columns
        .iter()
        .map(|c| CovariateColumn::new(c.name.clone(), rows.iter().map(|&i| c.values[i].clone()).collect()))
        .collect()
}
