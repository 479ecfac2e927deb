//! The three-block network: RGIN convolution, TopK pooling and a readout per
//! block, then a fully connected head over the concatenated summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fnc_graph::{Edge, FncGraph};
use crate::losses::{self, LossError, LossWeights};
use crate::pool::{PoolError, PoolLayer, PoolSelection};
use crate::readout::{Readout, ReadoutKind};
use crate::rgin::{AggregationMode, RginError, RginLayer};
use crate::scalar::Scalar;
use crate::tensor::{init, InitScheme, ParamId, ParamStore, Tape, TensorError, Var};

pub const BLOCKS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("graph has {got} nodes, model expects {expected}")]
    NodeCount { got: usize, expected: usize },
    #[error(transparent)]
    Rgin(#[from] RginError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_dims: [usize; BLOCKS],
    pub pool_ratios: [f64; BLOCKS],
    pub clusters_k: usize,
    pub aggregation: AggregationMode,
    pub readout: ReadoutKind,
    pub edge_keep_pct: f64,
    pub head_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layer_dims: [32, 128, 256],
            pool_ratios: [0.38; BLOCKS],
            clusters_k: 7,
            aggregation: AggregationMode::Sum,
            readout: ReadoutKind::Sero,
            edge_keep_pct: 1.0,
            head_hidden: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.layer_dims.contains(&0) {
            return Err(ConfigError::new("layer_dims", "dimensions must be positive"));
        }
        if let Some(r) = self.pool_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(ConfigError::new("pool_ratios", format!("{r} outside (0, 1]")));
        }
        if self.clusters_k == 0 {
            return Err(ConfigError::new("clusters_k", "must be at least 1"));
        }
        if !(self.edge_keep_pct > 0.0 && self.edge_keep_pct <= 1.0) {
            return Err(ConfigError::new("edge_keep_pct", format!("{} outside (0, 1]", self.edge_keep_pct)));
        }
        if self.head_hidden == Some(0) {
            return Err(ConfigError::new("head_hidden", "must be positive when set"));
        }
        Ok(())
    }

    /// Node count surviving each pooling layer, starting from `n_nodes`.
    pub fn keep_counts(&self, n_nodes: usize) -> [usize; BLOCKS] {
        let mut n = n_nodes;
        self.pool_ratios.map(|r| {
            n = crate::pool::keep_count(r, n);
            n
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub conv: RginLayer,
    pub pool: PoolLayer,
    pub readout: Readout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden: Option<(ParamId, ParamId)>,
    /// `1 x width`.
    pub w: ParamId,
    /// `1 x 1`.
    pub b: ParamId,
}

/// Architecture plus the parameter values it owns.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub n_nodes: usize,
    pub blocks: Vec<Block>,
    pub head: Head,
    pub store: ParamStore<T>,
}

/// Tape handles of one graph's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `1 x 1` prediction.
    pub pred: Var,
    /// Per block, `n x 1` sigmoid pooling gate over that block's input nodes.
    pub gates: Vec<Var>,
    /// Per block, the number of nodes kept.
    pub keep: Vec<usize>,
    pub selections: Vec<PoolSelection>,
    /// Per block attention, for attention readouts.
    pub z_space: Vec<Option<Var>>,
}

fn sub_seed(seed: u64, slot: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(slot.wrapping_mul(0x1000_0000_01B3))
}

/// Builds the network for `n_nodes`-node graphs with parameters drawn from `seed`.
pub fn assemble<T: Scalar>(config: &ModelConfig, n_nodes: usize, seed: u64) -> Result<Model<T>, ModelError> {
    config.validate()?;
    if n_nodes == 0 {
        return Err(ConfigError::new("n_nodes", "must be positive").into());
    }
    let mut store = ParamStore::new();
    let keep = config.keep_counts(n_nodes);
    let mut blocks = Vec::with_capacity(BLOCKS);
    let mut d_in = n_nodes;
    for (b, (&d_out, &ratio)) in config.layer_dims.iter().zip(&config.pool_ratios).enumerate() {
        let slot = 10 * b as u64;
        let conv = RginLayer::new(
            &mut store,
            &format!("block{b}.conv"),
            n_nodes,
            d_in,
            d_out,
            config.clusters_k,
            sub_seed(seed, slot),
        );
        let pool = PoolLayer::new(&mut store, &format!("block{b}.pool"), d_out, ratio, sub_seed(seed, slot + 1))?;
        let readout = Readout::new(
            config.readout,
            &mut store,
            &format!("block{b}.readout"),
            d_out,
            keep[b],
            sub_seed(seed, slot + 2),
        );
        blocks.push(Block { conv, pool, readout });
        d_in = d_out;
    }
    let width: usize = blocks.iter().map(|b| b.readout.summary_len()).sum();
    let head_seed = sub_seed(seed, 100);
    let (hidden, head_in) = match config.head_hidden {
        Some(hid) => {
            let w = store.push(init("head.hidden_w", (hid, width), InitScheme::uniform_fan_avg(head_seed)));
            let b = store.push(init("head.hidden_b", (1, hid), InitScheme::zeros()));
            (Some((w, b)), hid)
        }
        None => (None, width),
    };
    let w = store.push(init("head.w", (1, head_in), InitScheme::uniform_fan_avg(head_seed.wrapping_add(1))));
    let b = store.push(init("head.b", (1, 1), InitScheme::zeros()));
    Ok(Model {
        config: config.clone(),
        n_nodes,
        blocks,
        head: Head { hidden, w, b },
        store,
    })
}

impl<T: Scalar> Model<T> {
    /// Length of the concatenated block summaries fed to the head.
    pub fn summary_len(&self) -> usize {
        self.blocks.iter().map(|b| b.readout.summary_len()).sum()
    }

    pub fn pool_omegas(&self) -> Vec<ParamId> {
        self.blocks.iter().map(|b| b.pool.omega).collect()
    }

    pub fn forward(&self, tape: &mut Tape<'_, T>, graph: &FncGraph<T>) -> Result<ForwardOutput, ModelError> {
        if graph.n_nodes() != self.n_nodes {
            return Err(ModelError::NodeCount {
                got: graph.n_nodes(),
                expected: self.n_nodes,
            });
        }
        let mut h = tape.constant(graph.node_features.clone());
        let mut edges: Vec<Edge<T>> = graph.edges.clone();
        let mut roi_ids = graph.roi_ids.clone();
        let mut summaries = Vec::with_capacity(BLOCKS);
        let mut out = ForwardOutput {
            pred: h,
            gates: Vec::with_capacity(BLOCKS),
            keep: Vec::with_capacity(BLOCKS),
            selections: Vec::with_capacity(BLOCKS),
            z_space: Vec::with_capacity(BLOCKS),
        };
        for block in &self.blocks {
            let conv = block.conv.forward(tape, h, &edges, &roi_ids, self.config.aggregation)?;
            let pooled = block.pool.forward(tape, conv, &edges, &roi_ids)?;
            let read = block.readout.forward(tape, pooled.h)?;
            summaries.push(read.summary);
            out.gates.push(pooled.gate);
            out.keep.push(pooled.selection.kept_indices.len());
            out.selections.push(pooled.selection);
            out.z_space.push(read.z_space);
            h = pooled.h;
            edges = pooled.edges;
            roi_ids = pooled.roi_ids;
        }
        let mut x = tape.concat_cols(&summaries)?;
        if let Some((w, b)) = self.head.hidden {
            let w = tape.param(w);
            let b = tape.param(b);
            let z = tape.matmul_bt(x, w)?;
            let z = tape.add_row(z, b)?;
            x = tape.relu(z);
        }
        let w = tape.param(self.head.w);
        let b = tape.param(self.head.b);
        let y = tape.matmul_bt(x, w)?;
        out.pred = tape.add(y, b)?;
        Ok(out)
    }

    /// Scalar prediction for one graph.
    pub fn predict(&self, graph: &FncGraph<T>) -> Result<T, ModelError> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, graph)?;
        Ok(tape.scalar(out.pred))
    }
}

/// Per-graph share of the batch objective. Averaging these over a batch gives
/// `smooth_l1 + sum unit + lambda1 * sum tpk`, since the unit terms do not
/// depend on the graph.
pub struct GraphObjective {
    pub loss: Var,
    pub smooth_l1: Var,
    pub unit: Option<Var>,
    pub tpk: Option<Var>,
    pub forward: ForwardOutput,
}

pub fn graph_objective<T: Scalar>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    graph: &FncGraph<T>,
    target: T,
    weights: &LossWeights,
) -> Result<GraphObjective, ModelError> {
    weights.validate()?;
    let forward = model.forward(tape, graph)?;
    let smooth_l1 = losses::smooth_l1_var(tape, forward.pred, &[target])?;
    let mut unit = None;
    for &omega in &model.pool_omegas() {
        let w = tape.param(omega);
        let u = losses::unit_loss_var(tape, w, weights.unit_form);
        unit = Some(match unit {
            Some(acc) => tape.add(acc, u)?,
            None => u,
        });
    }
    let mut tpk = None;
    for (&gate, &k) in forward.gates.iter().zip(&forward.keep) {
        // With every node kept there is no unselected set to push down.
        if k >= tape.shape(gate).0 {
            continue;
        }
        let t = losses::tpk_loss_var(tape, gate, k)?;
        tpk = Some(match tpk {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
    }
    let mut loss = smooth_l1;
    if let Some(u) = unit {
        loss = tape.add(loss, u)?;
    }
    if let Some(t) = tpk {
        let t = tape.scale(t, T::lit(weights.lambda1));
        loss = tape.add(loss, t)?;
    }
    Ok(GraphObjective {
        loss,
        smooth_l1,
        unit,
        tpk,
        forward,
    })
}
