//! ROI-aware graph isomorphism convolution.
//!
//! Every node `i` gets its own weight matrix mixed from a shared basis,
//! `W_i = sum_u alpha_iu * beta_u + b`, where `alpha_i = relu(theta1 * r_i)` and
//! `r_i` is the node's one-hot ROI encoding. The update is
//!
//! ```text
//! h_i' = MLP((1 + eps) * W_i h_i + sum_{j in N(i)} e_ij * W_j h_j)
//! ```
//!
//! Because `W_j h_j` depends only on `j`, the layer computes the per-node
//! messages `m_j = W_j h_j` once and aggregates them with a dense weighted
//! adjacency. The basis stack `theta2` is stored as one `(K*d_out) x d_in`
//! tensor whose `u`-th block of `d_out` rows is `beta_u`.

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fnc_graph::{onehot_rows, Edge};
use crate::scalar::Scalar;
use crate::tensor::{init, init_with_fans, InitScheme, ParamId, ParamStore, Tape, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RginError {
    #[error("edge ({src}, {dst}) out of range for {n} nodes")]
    BadEdgeIndex { src: usize, dst: usize, n: usize },
    #[error("roi id {roi} out of range for {n_rois} one-hot slots")]
    BadRoi { roi: usize, n_rois: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    #[default]
    Sum,
    /// Neighbor sum divided by the neighbor count (0 for isolated nodes).
    Mean,
}

impl std::str::FromStr for AggregationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown aggregation `{other}` (expected sum|mean)")),
        }
    }
}

/// Parameter handles of one RGIN convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RginLayer {
    /// `K x n_rois`.
    pub theta1: ParamId,
    /// `(K*d_out) x d_in` basis stack.
    pub theta2: ParamId,
    /// `d_out x d_in`.
    pub bias: ParamId,
    /// `1 x 1`.
    pub epsilon: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub n_rois: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub clusters: usize,
}

impl RginLayer {
    /// Registers the layer's parameters: uniform fan-average matrices, zero biases, `eps = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        n_rois: usize,
        d_in: usize,
        d_out: usize,
        clusters: usize,
        seed: u64,
    ) -> Self {
        let name = |p: &str| format!("{prefix}.{p}");
        let theta1 = store.push(init(&name("theta1"), (clusters, n_rois), InitScheme::uniform_fan_avg(seed)));
        let theta2 = store.push(init_with_fans(
            &name("theta2"),
            (clusters * d_out, d_in),
            d_in,
            d_out,
            InitScheme::uniform_fan_avg(seed.wrapping_add(1)),
        ));
        let bias = store.push(init(&name("bias"), (d_out, d_in), InitScheme::zeros()));
        let epsilon = store.push(init(&name("epsilon"), (1, 1), InitScheme::zeros()));
        let mlp_w1 = store.push(init(&name("mlp_w1"), (d_out, d_out), InitScheme::uniform_fan_avg(seed.wrapping_add(2))));
        let mlp_b1 = store.push(init(&name("mlp_b1"), (1, d_out), InitScheme::zeros()));
        let mlp_w2 = store.push(init(&name("mlp_w2"), (d_out, d_out), InitScheme::uniform_fan_avg(seed.wrapping_add(3))));
        let mlp_b2 = store.push(init(&name("mlp_b2"), (1, d_out), InitScheme::zeros()));
        Self {
            theta1,
            theta2,
            bias,
            epsilon,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            n_rois,
            d_in,
            d_out,
            clusters,
        }
    }

    /// Sets the MLP to the identity map (`w1 = w2 = I`, zero biases).
    ///
    /// The hidden ReLU still clips negative pre-activations, so this is an exact
    /// identity only on non-negative inputs.
    pub fn set_identity_mlp<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.mlp_w1).data = Array2::eye(self.d_out);
        store.get_mut(self.mlp_w2).data = Array2::eye(self.d_out);
        store.get_mut(self.mlp_b1).data.fill(T::zero());
        store.get_mut(self.mlp_b2).data.fill(T::zero());
    }

    pub fn params(&self) -> [ParamId; 8] {
        [
            self.theta1,
            self.theta2,
            self.bias,
            self.epsilon,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
        ]
    }

    /// Runs the convolution on `h` (`n x d_in`) over `edges`, with node `i` carrying ROI `roi_ids[i]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        h: Var,
        edges: &[Edge<T>],
        roi_ids: &[usize],
        mode: AggregationMode,
    ) -> Result<Var, RginError> {
        let (n, d_in) = tape.shape(h);
        if d_in != self.d_in || roi_ids.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "rgin_forward",
                left: (n, d_in),
                right: (roi_ids.len(), self.d_in),
            }
            .into());
        }
        if let Some(&roi) = roi_ids.iter().find(|&&r| r >= self.n_rois) {
            return Err(RginError::BadRoi {
                roi,
                n_rois: self.n_rois,
            });
        }
        let adj = aggregation_matrix(n, edges, mode)?;

        let onehot = tape.constant(onehot_rows(roi_ids, self.n_rois));
        let theta1 = tape.param(self.theta1);
        let assign = tape.matmul_bt(onehot, theta1)?;
        let alpha = tape.relu(assign);

        let theta2 = tape.param(self.theta2);
        let proj = tape.matmul_bt(h, theta2)?;
        let mixed = tape.basis_mix(proj, alpha)?;
        let bias = tape.param(self.bias);
        let shared = tape.matmul_bt(h, bias)?;
        let messages = tape.add(mixed, shared)?;

        let eps = tape.param(self.epsilon);
        let one_plus_eps = tape.add_const(eps, T::one());
        let own = tape.mul_scalar(messages, one_plus_eps)?;
        let adj = tape.constant(adj);
        let neigh = tape.matmul(adj, messages)?;
        let pre = tape.add(own, neigh)?;

        let w1 = tape.param(self.mlp_w1);
        let b1 = tape.param(self.mlp_b1);
        let w2 = tape.param(self.mlp_w2);
        let b2 = tape.param(self.mlp_b2);
        let z = tape.matmul_bt(pre, w1)?;
        let z = tape.add_row(z, b1)?;
        let z = tape.relu(z);
        let z = tape.matmul_bt(z, w2)?;
        Ok(tape.add_row(z, b2)?)
    }
}

/// Dense `n x n` matrix with `A[i][j] = e_ij` (divided by `|N(i)|` in mean mode).
pub fn aggregation_matrix<T: Scalar>(
    n: usize,
    edges: &[Edge<T>],
    mode: AggregationMode,
) -> Result<Array2<T>, RginError> {
    let mut adj = Array2::<T>::zeros((n, n));
    let mut degree = vec![0usize; n];
    for e in edges {
        if e.src >= n || e.dst >= n {
            return Err(RginError::BadEdgeIndex {
                src: e.src,
                dst: e.dst,
                n,
            });
        }
        adj[[e.src, e.dst]] += e.weight;
        degree[e.src] += 1;
    }
    if mode == AggregationMode::Mean {
        for (i, &deg) in degree.iter().enumerate() {
            if deg > 0 {
                let inv = T::one() / T::from_count(deg);
                adj.row_mut(i).mapv_inplace(|v| v * inv);
            }
        }
    }
    Ok(adj)
}

/// Non-negative cluster scores, `n x K`: row `i` is `relu(theta1 * r_i)`.
pub fn cluster_assignments<T: Scalar>(theta1: ArrayView2<'_, T>, onehot: ArrayView2<'_, T>) -> Array2<T> {
    onehot
        .dot(&theta1.t())
        .mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// `W_i = sum_u alpha_u * beta_u + b` for one node.
pub fn node_weight<T: Scalar>(
    alpha: ArrayView1<'_, T>,
    theta2: ArrayView2<'_, T>,
    bias: ArrayView2<'_, T>,
) -> Array2<T> {
    let d_out = bias.nrows();
    assert_eq!(theta2.nrows(), alpha.len() * d_out, "basis stack shape");
    let mut w = bias.to_owned();
    for (u, &a) in alpha.iter().enumerate() {
        w.scaled_add(a, &theta2.slice(s![u * d_out..(u + 1) * d_out, ..]));
    }
    w
}
