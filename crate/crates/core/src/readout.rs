//! Graph-level readouts.
//!
//! Node features are node-major (`n x d`, one row per node). Attention
//! readouts return the attended summary `h = H^T z` together with the
//! per-node attention vector `z` (`n x 1`).

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{init, InitScheme, ParamId, ParamStore, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutKind {
    #[default]
    Sero,
    Garo,
    Meanmax,
}

impl std::str::FromStr for ReadoutKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sero" => Ok(Self::Sero),
            "garo" => Ok(Self::Garo),
            "meanmax" => Ok(Self::Meanmax),
            other => Err(format!("unknown readout `{other}` (expected sero|garo|meanmax)")),
        }
    }
}

/// Squeeze-excitation readout. Attention is indexed by node position, so the
/// node count is fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SeroReadout {
    /// `d x d`.
    pub w1: ParamId,
    /// `n x d`.
    pub w2: ParamId,
    pub dim: usize,
    pub nodes: usize,
}

/// Key-query attention readout.
#[derive(Clone, Debug, PartialEq)]
pub struct GaroReadout {
    pub w_key: ParamId,
    pub w_query: ParamId,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Readout {
    Sero(SeroReadout),
    Garo(GaroReadout),
    MeanMax { dim: usize },
}

pub struct ReadoutOutput {
    /// `1 x summary_len`.
    pub summary: Var,
    /// `n x 1` attention, for the attention readouts.
    pub z_space: Option<Var>,
}

impl SeroReadout {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, nodes: usize, seed: u64) -> Self {
        let w1 = store.push(init(&format!("{prefix}.w1"), (dim, dim), InitScheme::uniform_fan_avg(seed)));
        let w2 = store.push(init(&format!("{prefix}.w2"), (nodes, dim), InitScheme::uniform_fan_avg(seed.wrapping_add(1))));
        Self { w1, w2, dim, nodes }
    }

    /// `z = mean(H)`, `z_space = sigmoid(W2 relu(W1 z))`, `h = H^T z_space`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<(Var, Var), TensorError> {
        let n = tape.shape(h).0;
        if n != self.nodes {
            return Err(TensorError::ShapeMismatch {
                op: "sero",
                left: tape.shape(h),
                right: (self.nodes, self.dim),
            });
        }
        let z = tape.mean_rows(h)?;
        let w1 = tape.param(self.w1);
        let a = tape.matmul_bt(z, w1)?;
        let a = tape.relu(a);
        let w2 = tape.param(self.w2);
        let logits = tape.matmul_bt(a, w2)?;
        let attn = tape.sigmoid(logits);
        let summary = tape.matmul(attn, h)?;
        let z_space = tape.transpose(attn);
        Ok((summary, z_space))
    }
}

impl GaroReadout {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, seed: u64) -> Self {
        let w_key = store.push(init(&format!("{prefix}.w_key"), (dim, dim), InitScheme::uniform_fan_avg(seed)));
        let w_query = store.push(init(&format!("{prefix}.w_query"), (dim, dim), InitScheme::uniform_fan_avg(seed.wrapping_add(1))));
        Self { w_key, w_query, dim }
    }

    /// `K = W_key H`, `q = W_query mean(H)`, `z_space = sigmoid(q^T K / sqrt(d))`, `h = H^T z_space`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<(Var, Var), TensorError> {
        let d = tape.shape(h).1;
        let w_key = tape.param(self.w_key);
        let keys = tape.matmul_bt(h, w_key)?;
        let mean = tape.mean_rows(h)?;
        let w_query = tape.param(self.w_query);
        let query = tape.matmul_bt(mean, w_query)?;
        let logits = tape.matmul_bt(query, keys)?;
        let logits = tape.scale(logits, T::one() / T::from_count(d).sqrt());
        let attn = tape.sigmoid(logits);
        let summary = tape.matmul(attn, h)?;
        let z_space = tape.transpose(attn);
        Ok((summary, z_space))
    }
}

/// Concatenation of the elementwise mean and max over nodes: `1 x 2d`.
pub fn meanmax<T: Scalar>(tape: &mut Tape<'_, T>, h: Var) -> Result<Var, TensorError> {
    let mean = tape.mean_rows(h)?;
    let max = tape.max_rows(h)?;
    tape.concat_cols(&[mean, max])
}

/// Joins per-layer summaries in layer order.
pub fn concat_layers<T: Scalar>(tape: &mut Tape<'_, T>, summaries: &[Var]) -> Result<Var, TensorError> {
    if summaries.is_empty() {
        return Err(TensorError::Empty("concat_layers"));
    }
    tape.concat_cols(summaries)
}

impl Readout {
    /// Builds a readout for `dim`-wide features over `nodes` nodes.
    pub fn new<T: Scalar>(kind: ReadoutKind, store: &mut ParamStore<T>, prefix: &str, dim: usize, nodes: usize, seed: u64) -> Self {
        match kind {
            ReadoutKind::Sero => Readout::Sero(SeroReadout::new(store, prefix, dim, nodes, seed)),
            ReadoutKind::Garo => Readout::Garo(GaroReadout::new(store, prefix, dim, seed)),
            ReadoutKind::Meanmax => Readout::MeanMax { dim },
        }
    }

    pub fn summary_len(&self) -> usize {
        match self {
            Readout::Sero(r) => r.dim,
            Readout::Garo(r) => r.dim,
            Readout::MeanMax { dim } => 2 * dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<ReadoutOutput, TensorError> {
        Ok(match self {
            Readout::Sero(r) => {
                let (summary, z) = r.forward(tape, h)?;
                ReadoutOutput { summary, z_space: Some(z) }
            }
            Readout::Garo(r) => {
                let (summary, z) = r.forward(tape, h)?;
                ReadoutOutput { summary, z_space: Some(z) }
            }
            Readout::MeanMax { .. } => ReadoutOutput {
                summary: meanmax(tape, h)?,
                z_space: None,
            },
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Readout::Sero(r) => vec![r.w1, r.w2],
            Readout::Garo(r) => vec![r.w_key, r.w_query],
            Readout::MeanMax { .. } => Vec::new(),
        }
    }
}
