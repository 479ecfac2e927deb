//! Functional-connectivity graphs from region time series.

use ndarray::{Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FncError {
    #[error("region {0} has zero variance")]
    ZeroVariance(usize),
    #[error("non-finite value at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("time series needs at least 2 regions and 3 samples, got {regions}x{samples}")]
    TooSmall { regions: usize, samples: usize },
    #[error("{count} region ids for {regions} regions")]
    RegionIds { count: usize, regions: usize },
    #[error("keep fraction must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("invalid connectivity matrix: {0}")]
    InvalidMatrix(String),
}

/// Region-by-sample signal matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries<T> {
    values: Array2<T>,
    region_ids: Vec<String>,
}

impl<T: Scalar> TimeSeries<T> {
    /// Validates shape and finiteness. Zero variance is reported by [`pearson_fnc`].
    pub fn new(values: Array2<T>, region_ids: Vec<String>) -> Result<Self, FncError> {
        let (regions, samples) = values.dim();
        if regions < 2 || samples < 3 {
            return Err(FncError::TooSmall { regions, samples });
        }
        if region_ids.len() != regions {
            return Err(FncError::RegionIds {
                count: region_ids.len(),
                regions,
            });
        }
        if let Some(((r, c), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(FncError::NonFinite(r, c));
        }
        Ok(Self { values, region_ids })
    }

    /// Region ids default to `0..N` rendered as strings.
    pub fn from_values(values: Array2<T>) -> Result<Self, FncError> {
        let ids = (0..values.nrows()).map(|i| i.to_string()).collect();
        Self::new(values, ids)
    }

    pub fn values(&self) -> ArrayView2<'_, T> {
        self.values.view()
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn regions(&self) -> usize {
        self.values.nrows()
    }

    pub fn samples(&self) -> usize {
        self.values.ncols()
    }
}

/// Symmetric Pearson correlation matrix with unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct FncMatrix<T> {
    values: Array2<T>,
}

impl<T: Scalar> FncMatrix<T> {
    /// Accepts a precomputed matrix. Symmetry is checked to `1e-9`; the diagonal must be 1
    /// within the same tolerance and is then set to exactly 1.
    pub fn new(mut values: Array2<T>) -> Result<Self, FncError> {
        let (r, c) = values.dim();
        if r != c || r < 2 {
            return Err(FncError::InvalidMatrix(format!("expected square N>=2, got {r}x{c}")));
        }
        let tol = T::lit(1e-9);
        for i in 0..r {
            for j in 0..c {
                let v = values[[i, j]];
                if !v.is_finite() {
                    return Err(FncError::NonFinite(i, j));
                }
                if v.abs() > T::one() + tol {
                    return Err(FncError::InvalidMatrix(format!("|value| > 1 at ({i}, {j})")));
                }
                if (v - values[[j, i]]).abs() > tol {
                    return Err(FncError::InvalidMatrix(format!("asymmetric at ({i}, {j})")));
                }
            }
            if (values[[i, i]] - T::one()).abs() > tol {
                return Err(FncError::InvalidMatrix(format!("diagonal entry {i} is not 1")));
            }
            values[[i, i]] = T::one();
        }
        values.mapv_inplace(|v| v.max(-T::one()).min(T::one()));
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView2<'_, T> {
        self.values.view()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[[i, j]]
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn into_inner(self) -> Array2<T> {
        self.values
    }
}

/// Sample Pearson correlation between every pair of regions.
pub fn pearson_fnc<T: Scalar>(ts: &TimeSeries<T>) -> Result<FncMatrix<T>, FncError> {
    let x = ts.values();
    let (n, t) = x.dim();
    let means = x.sum_axis(Axis(1)).mapv(|s| s / T::from_count(t));
    let mut centered = x.to_owned();
    for (mut row, &m) in centered.rows_mut().into_iter().zip(means.iter()) {
        row.mapv_inplace(|v| v - m);
    }
    let norms: Vec<T> = centered
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    for (i, &nrm) in norms.iter().enumerate() {
        let scale = x.row(i).iter().fold(T::zero(), |a, v| a.max(v.abs()));
        if !(nrm > T::epsilon() * scale * T::from_count(t)) {
            return Err(FncError::ZeroVariance(i));
        }
    }
    let mut out = Array2::<T>::zeros((n, n));
    for i in 0..n {
        out[[i, i]] = T::one();
        for j in (i + 1)..n {
            let r = centered.row(i).dot(&centered.row(j)) / (norms[i] * norms[j]);
            let r = r.max(-T::one()).min(T::one());
            out[[i, j]] = r;
            out[[j, i]] = r;
        }
    }
    Ok(FncMatrix { values: out })
}

/// Directed weighted edge `src -> dst`; `dst` is a neighbor of `src`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge<T> {
    pub src: usize,
    pub dst: usize,
    pub weight: T,
}

/// `ceil(fraction * n)`, treating products within `1e-9` of an integer as that integer.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() < 1e-9 { nearest } else { raw.ceil() };
    (k.max(0.0) as usize).min(n)
}

/// Keeps the strongest `ceil(keep_pct * N(N-1)/2)` undirected pairs by `|correlation|`.
///
/// Ties are broken by `(i, j)` ascending. Every kept pair appears in both
/// directions with its signed weight; the list is sorted by `(src, dst)`.
pub fn threshold_edges<T: Scalar>(fnc: &FncMatrix<T>, keep_pct: f64) -> Result<Vec<Edge<T>>, FncError> {
    if !(keep_pct > 0.0 && keep_pct <= 1.0) {
        return Err(FncError::InvalidThreshold(keep_pct));
    }
    let n = fnc.n();
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let keep = ceil_count(keep_pct, pairs.len());
    if keep < pairs.len() {
        pairs.sort_by(|&(a, b), &(c, d)| {
            let (x, y) = (fnc.get(a, b).abs(), fnc.get(c, d).abs());
            y.partial_cmp(&x)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then((a, b).cmp(&(c, d)))
        });
        pairs.truncate(keep);
    }
    let mut edges: Vec<Edge<T>> = pairs
        .into_iter()
        .flat_map(|(i, j)| {
            let w = fnc.get(i, j);
            [
                Edge { src: i, dst: j, weight: w },
                Edge { src: j, dst: i, weight: w },
            ]
        })
        .collect();
    edges.sort_by_key(|e| (e.src, e.dst));
    Ok(edges)
}

/// One subject's graph: FNC rows as node features, thresholded edges, ROI identities.
#[derive(Clone, Debug, PartialEq)]
pub struct FncGraph<T> {
    pub node_features: Array2<T>,
    pub edges: Vec<Edge<T>>,
    /// ROI identity of each node; node `i`'s one-hot encoding has its 1 at `roi_ids[i]`.
    pub roi_ids: Vec<usize>,
    /// Length of the one-hot encodings (number of ROIs in the atlas).
    pub n_rois: usize,
    pub label: T,
}

impl<T: Scalar> FncGraph<T> {
    pub fn n_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    /// `n_nodes x n_rois` one-hot position encodings.
    pub fn onehot(&self) -> Array2<T> {
        onehot_rows(&self.roi_ids, self.n_rois)
    }

    /// Relabels nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut edges: Vec<Edge<T>> = self
            .edges
            .iter()
            .map(|e| Edge {
                src: inverse[e.src],
                dst: inverse[e.dst],
                weight: e.weight,
            })
            .collect();
        edges.sort_by_key(|e| (e.src, e.dst));
        Self {
            node_features: self.node_features.select(Axis(0), perm),
            edges,
            roi_ids: perm.iter().map(|&p| self.roi_ids[p]).collect(),
            n_rois: self.n_rois,
            label: self.label,
        }
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Scalar>(&self) -> FncGraph<U> {
        let conv = |v: T| U::lit(v.to_f64_lossy());
        FncGraph {
            node_features: self.node_features.mapv(conv),
            edges: self
                .edges
                .iter()
                .map(|e| Edge {
                    src: e.src,
                    dst: e.dst,
                    weight: conv(e.weight),
                })
                .collect(),
            roi_ids: self.roi_ids.clone(),
            n_rois: self.n_rois,
            label: conv(self.label),
        }
    }
}

pub fn onehot_rows<T: Scalar>(roi_ids: &[usize], n_rois: usize) -> Array2<T> {
    let mut m = Array2::zeros((roi_ids.len(), n_rois));
    for (i, &r) in roi_ids.iter().enumerate() {
        m[[i, r]] = T::one();
    }
    m
}

/// Builds the graph; node features are the full unthresholded FNC rows.
pub fn build_graph<T: Scalar>(fnc: &FncMatrix<T>, keep_pct: f64, label: T) -> Result<FncGraph<T>, FncError> {
    let edges = threshold_edges(fnc, keep_pct)?;
    let n = fnc.n();
    Ok(FncGraph {
        node_features: fnc.values.clone(),
        edges,
        roi_ids: (0..n).collect(),
        n_rois: n,
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_series(n: usize, t: usize, seed: u64) -> TimeSeries<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimeSeries::from_values(Array2::from_shape_fn((n, t), |_| rng.gen_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn identical_and_negated_rows() {
        let ts = TimeSeries::<f64>::from_values(array![
            [1.0, 2.0, 4.0, 3.0],
            [1.0, 2.0, 4.0, 3.0],
            [-1.0, -2.0, -4.0, -3.0]
        ])
        .unwrap();
        let f: FncMatrix<f64> = pearson_fnc(&ts).unwrap();
        assert!((f.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((f.get(0, 2) + 1.0).abs() < 1e-15);
        assert_eq!(f.get(2, 2), 1.0);
    }

    #[test]
    fn constant_row_is_zero_variance() {
        let ts = TimeSeries::from_values(array![[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]).unwrap();
        assert_eq!(pearson_fnc(&ts), Err(FncError::ZeroVariance(1)));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let err = TimeSeries::from_values(array![[1.0, f64::NAN, 3.0], [1.0, 2.0, 3.0]]).unwrap_err();
        assert_eq!(err, FncError::NonFinite(0, 1));
        assert!(matches!(
            TimeSeries::from_values(array![[1.0, 2.0], [3.0, 4.0]]),
            Err(FncError::TooSmall { .. })
        ));
    }

    #[test]
    fn full_threshold_keeps_every_pair() {
        let ts = random_series(53, 60, 3);
        let f = pearson_fnc(&ts).unwrap();
        let edges = threshold_edges(&f, 1.0).unwrap();
        assert_eq!(edges.len(), 53 * 52);
        assert!(edges.iter().all(|e| e.src != e.dst));
    }

    #[test]
    fn invalid_threshold() {
        let f = FncMatrix::new(Array2::<f64>::eye(3)).unwrap();
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(threshold_edges(&f, bad), Err(FncError::InvalidThreshold(_))));
        }
    }

    #[test]
    fn identity_fnc_gives_zero_weight_edges() {
        let f = FncMatrix::new(Array2::<f64>::eye(4)).unwrap();
        let g = build_graph(&f, 1.0, 2.5).unwrap();
        assert_eq!(g.edges.len(), 12);
        assert!(g.edges.iter().all(|e| e.weight == 0.0));
        assert_eq!(g.node_features.dim(), (4, 4));
        assert_eq!(g.onehot(), Array2::<f64>::eye(4));
    }

    #[test]
    fn ties_break_lexicographically() {
        let f = FncMatrix::new(array![
            [1.0, 0.5, 0.5, 0.1],
            [0.5, 1.0, 0.1, 0.1],
            [0.5, 0.1, 1.0, 0.5],
            [0.1, 0.1, 0.5, 1.0]
        ])
        .unwrap();
        // Three pairs tie at |0.5|; only two slots.
        let e = threshold_edges(&f, 2.0 / 6.0).unwrap();
        let pairs: Vec<_> = e.iter().filter(|e| e.src < e.dst).map(|e| (e.src, e.dst)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn fnc_matrix_validation() {
        assert!(FncMatrix::new(array![[1.0, 0.2], [0.3, 1.0]]).is_err());
        assert!(FncMatrix::new(array![[0.9, 0.2], [0.2, 1.0]]).is_err());
        assert!(FncMatrix::new(array![[1.0, 1.2], [1.2, 1.0]]).is_err());
        assert!(FncMatrix::new(array![[1.0, -0.2], [-0.2, 1.0]]).is_ok());
    }

    #[test]
    fn ceil_count_cases() {
        assert_eq!(ceil_count(0.38, 53), 21);
        assert_eq!(ceil_count(0.46, 53), 25);
        assert_eq!(ceil_count(0.78, 53), 42);
        assert_eq!(ceil_count(0.38, 21), 8);
        assert_eq!(ceil_count(0.38, 8), 4);
        assert_eq!(ceil_count(0.5, 6), 3);
        assert_eq!(ceil_count(1.0, 7), 7);
    }

    #[test]
    fn permuted_graph_moves_edges_and_identities() {
        let f = FncMatrix::new(array![[1.0, 0.3, -0.2], [0.3, 1.0, 0.6], [-0.2, 0.6, 1.0]]).unwrap();
        let g = build_graph(&f, 1.0, 0.0).unwrap();
        let p = g.permuted(&[2, 0, 1]);
        assert_eq!(p.roi_ids, vec![2, 0, 1]);
        assert_eq!(p.node_features.row(0), g.node_features.row(2));
        let w = p.edges.iter().find(|e| e.src == 0 && e.dst == 2).unwrap().weight;
        assert_eq!(w, 0.6);
    }
}
