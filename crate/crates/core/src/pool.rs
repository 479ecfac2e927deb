//! ROI-aware TopK pooling.
//!
//! Nodes are scored by projection onto a learnable vector, the scores are
//! standardized, the top `k` nodes survive, and surviving features are gated
//! by the sigmoid of their standardized score. The selection itself is not
//! differentiable; gradients reach the projection vector through the gate.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fnc_graph::{ceil_count, Edge};
use crate::scalar::Scalar;
use crate::tensor::{init, sigmoid_value, InitScheme, ParamId, ParamStore, Tape, TensorError, Var};

const MIN_PROJECTION_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("projection vector norm {0:e} is below 1e-12")]
    ZeroProjection(f64),
    #[error("pool ratio must lie in (0, 1], got {0}")]
    InvalidRatio(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Number of nodes kept out of `n`: `max(1, ceil(ratio * n))`.
pub fn keep_count(ratio: f64, n: usize) -> usize {
    ceil_count(ratio, n).max(1)
}

/// Per-graph record of one pooling step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSelection {
    /// Indices into the pre-pool node set, strictly increasing.
    pub kept_indices: Vec<usize>,
    /// `sigmoid(s~)` of the kept nodes, in `kept_indices` order.
    pub gated_scores: Vec<f64>,
    /// Standardized scores `s~` of every pre-pool node.
    pub raw_scores: Vec<f64>,
}

/// `s = H w / ||w||_2`.
pub fn node_scores<T: Scalar>(h: ArrayView2<'_, T>, omega: ArrayView1<'_, T>) -> Result<Array1<T>, PoolError> {
    let norm = omega.dot(&omega).sqrt();
    if !(norm.to_f64_lossy() >= MIN_PROJECTION_NORM) {
        return Err(PoolError::ZeroProjection(norm.to_f64_lossy()));
    }
    if h.ncols() != omega.len() {
        return Err(TensorError::ShapeMismatch {
            op: "node_scores",
            left: h.dim(),
            right: (omega.len(), 1),
        }
        .into());
    }
    Ok(h.dot(&omega).mapv(|v| v / norm))
}

/// `(s - mean) / std` with the population standard deviation; all zeros when `std < 1e-8`.
pub fn normalize_scores<T: Scalar>(s: ArrayView1<'_, T>) -> Array1<T> {
    let n = T::from_count(s.len().max(1));
    let mean = s.sum() / n;
    let std = (s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n).sqrt();
    if std < T::lit(1e-8) {
        Array1::zeros(s.len())
    } else {
        s.mapv(|v| (v - mean) / std)
    }
}

/// Indices of the `max(1, ceil(ratio * n))` largest scores, ties to the smaller index,
/// returned ascending.
pub fn select_topk<T: Scalar>(scores: &[T], ratio: f64) -> Vec<usize> {
    let k = keep_count(ratio, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Edges with both endpoints kept, re-indexed to positions within `kept`.
pub fn induced_edges<T: Scalar>(edges: &[Edge<T>], kept: &[usize], n: usize) -> Vec<Edge<T>> {
    let mut position = vec![usize::MAX; n];
    for (new, &old) in kept.iter().enumerate() {
        position[old] = new;
    }
    edges
        .iter()
        .filter_map(|e| {
            let (s, d) = (position[e.src], position[e.dst]);
            (s != usize::MAX && d != usize::MAX).then_some(Edge {
                src: s,
                dst: d,
                weight: e.weight,
            })
        })
        .collect()
}

/// Gates `h` by `sigmoid(s~)` and keeps the selected rows and their induced edges.
pub fn pool<T: Scalar>(
    h: ArrayView2<'_, T>,
    edges: &[Edge<T>],
    normalized: ArrayView1<'_, T>,
    kept: &[usize],
) -> (Array2<T>, Vec<Edge<T>>, PoolSelection) {
    let gate = normalized.mapv(sigmoid_value);
    let gated = &h * &gate.view().insert_axis(Axis(1));
    let h_next = gated.select(Axis(0), kept);
    let edges_next = induced_edges(edges, kept, h.nrows());
    let selection = PoolSelection {
        kept_indices: kept.to_vec(),
        gated_scores: kept.iter().map(|&i| gate[i].to_f64_lossy()).collect(),
        raw_scores: normalized.iter().map(|v| v.to_f64_lossy()).collect(),
    };
    (h_next, edges_next, selection)
}

/// Result of pooling one graph on a tape.
#[derive(Clone, Debug)]
pub struct PoolOutput<T> {
    pub h: Var,
    /// `n x 1` sigmoid of the standardized scores of every pre-pool node.
    pub gate: Var,
    pub edges: Vec<Edge<T>>,
    pub roi_ids: Vec<usize>,
    pub selection: PoolSelection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolLayer {
    /// `d x 1` projection vector.
    pub omega: ParamId,
    pub ratio: f64,
    pub dim: usize,
}

impl PoolLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, ratio: f64, seed: u64) -> Result<Self, PoolError> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(PoolError::InvalidRatio(ratio));
        }
        let omega = store.push(init(&format!("{prefix}.omega"), (dim, 1), InitScheme::uniform_fan_avg(seed)));
        Ok(Self { omega, ratio, dim })
    }

    pub fn keep_count(&self, n: usize) -> usize {
        keep_count(self.ratio, n)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        h: Var,
        edges: &[Edge<T>],
        roi_ids: &[usize],
    ) -> Result<PoolOutput<T>, PoolError> {
        let n = tape.shape(h).0;
        let omega = tape.param(self.omega);
        let norm = tape.norm2(omega);
        let norm_value = tape.scalar(norm).to_f64_lossy();
        if !(norm_value >= MIN_PROJECTION_NORM) {
            return Err(PoolError::ZeroProjection(norm_value));
        }
        let proj = tape.matmul(h, omega)?;
        let inv = tape.recip(norm);
        let scores = tape.mul_scalar(proj, inv)?;
        let normalized = tape.standardize(scores)?;
        let gate = tape.sigmoid(normalized);

        let s_tilde: Vec<T> = tape.value(normalized).iter().copied().collect();
        let kept = select_topk(&s_tilde, self.ratio);

        let gated = tape.mul_col(h, gate)?;
        let h_next = tape.gather_rows(gated, &kept)?;
        let gate_values = tape.value(gate);
        let selection = PoolSelection {
            gated_scores: kept.iter().map(|&i| gate_values[[i, 0]].to_f64_lossy()).collect(),
            raw_scores: s_tilde.iter().map(|v| v.to_f64_lossy()).collect(),
            kept_indices: kept.clone(),
        };
        Ok(PoolOutput {
            h: h_next,
            gate,
            edges: induced_edges(edges, &kept, n),
            roi_ids: kept.iter().map(|&i| roi_ids[i]).collect(),
            selection,
        })
    }
}
