//! Optimization, splitting and evaluation.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fnc_graph::FncGraph;
use crate::losses::{LossWeights, UnitLossForm};
use crate::model::{graph_objective, Model, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{Checkpoint, Gradients, ParamStore, Tape};

/// Graphs per gradient chunk. Chunks are reduced in index order, so the merged
/// gradient does not depend on how many threads processed them.
const CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: non-finite {what}; parameters restored to the last good checkpoint")]
    Diverged {
        epoch: usize,
        what: &'static str,
        history: Vec<EpochRecord>,
    },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("invalid training config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub unit_form: UnitLossForm,
    pub seeds: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Shuffle seed of the train/val/test split, shared by all model seeds.
    pub split_seed: u64,
    pub split_fractions: [f64; 3],
    /// Train on z-scored targets; predictions are mapped back to score units.
    pub standardize_targets: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_decay_every: 30,
            lr_decay_factor: 0.5,
            epochs: 60,
            batch_size: 64,
            lambda1: 0.1,
            unit_form: UnitLossForm::Signed,
            seeds: vec![0, 1, 2, 3],
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            split_seed: 0,
            split_fractions: [0.70, 0.15, 0.15],
            standardize_targets: true,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, reason: &str| {
            Err(TrainError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", "must be positive");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every", "must be at least 1");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor", "must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad("lambda1", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return bad("split_fractions", "must be non-negative and sum to 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            unit_form: self.unit_form,
        }
    }

    /// Step schedule: `lr0 * factor^(epoch / every)` for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Array2<T>> = store.iter().map(|p| Array2::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = &mut store.get_mut(id).data;
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

/// Index sets of a train/validation/test split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` by `seed` and cuts it into rounded fractions; test takes the remainder.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64 + 0.5).floor() as usize).min(n);
    let n_val = ((fractions[1] * n as f64 + 0.5).floor() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split { train: idx, val, test }
}

/// Affine map between score units and the units the model is trained in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn fit(targets: &[f64]) -> Self {
        if targets.is_empty() {
            return Self::identity();
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn to_model(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn to_score(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Graphs with their targets in score units.
#[derive(Clone, Debug)]
pub struct Subset<'a, T> {
    pub ids: Vec<String>,
    pub graphs: Vec<&'a FncGraph<T>>,
    pub targets: Vec<f64>,
}

impl<'a, T> Subset<'a, T> {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub smooth_l1: f64,
    pub unit: f64,
    pub tpk: f64,
    pub total: f64,
    pub val_mse: f64,
    pub val_corr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Zero-based epoch whose parameters were kept, if any epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    smooth_l1: f64,
    unit: f64,
    tpk: f64,
    total: f64,
    count: usize,
}

impl Sums {
    fn add(&mut self, o: &Sums) {
        self.smooth_l1 += o.smooth_l1;
        self.unit += o.unit;
        self.tpk += o.tpk;
        self.total += o.total;
        self.count += o.count;
    }

    fn finite(&self) -> bool {
        self.total.is_finite() && self.smooth_l1.is_finite() && self.unit.is_finite() && self.tpk.is_finite()
    }
}

/// Gradient of the batch-mean objective, with summed per-graph loss terms.
fn batch_gradient<T: Scalar>(
    model: &Model<T>,
    graphs: &[&FncGraph<T>],
    targets: &[T],
    weights: &LossWeights,
) -> Result<(Gradients<T>, Sums), ModelError> {
    let scale = T::one() / T::from_count(graphs.len());
    let chunk_results: Vec<Result<(Gradients<T>, Sums), ModelError>> = graphs
        .par_chunks(CHUNK)
        .zip(targets.par_chunks(CHUNK))
        .map(|(gs, ts)| {
            let mut grads = Gradients::for_store(&model.store);
            let mut sums = Sums::default();
            for (g, &t) in gs.iter().zip(ts) {
                let mut tape = Tape::new(&model.store);
                let obj = graph_objective(&mut tape, model, g, t, weights)?;
                sums.smooth_l1 += tape.scalar(obj.smooth_l1).to_f64_lossy();
                sums.unit += obj.unit.map_or(0.0, |u| tape.scalar(u).to_f64_lossy());
                sums.tpk += obj.tpk.map_or(0.0, |v| tape.scalar(v).to_f64_lossy());
                sums.total += tape.scalar(obj.loss).to_f64_lossy();
                sums.count += 1;
                tape.backward_into(obj.loss, scale, &mut grads)?;
            }
            Ok((grads, sums))
        })
        .collect();
    let mut grads = Gradients::for_store(&model.store);
    let mut sums = Sums::default();
    for r in chunk_results {
        let (g, s) = r?;
        grads.merge(&g);
        sums.add(&s);
    }
    Ok((grads, sums))
}

/// Model-space predictions mapped to score units, in subset order.
pub fn predict_all<T: Scalar>(model: &Model<T>, graphs: &[&FncGraph<T>], scaler: &TargetScaler) -> Result<Vec<f64>, ModelError> {
    graphs
        .par_iter()
        .map(|g| model.predict(g).map(|p| scaler.to_score(p.to_f64_lossy())))
        .collect()
}

/// Runs `cfg.epochs` epochs of Adam on the batch-mean objective and leaves the
/// parameters of the best-validation-MSE epoch in `model`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Subset<'_, T>,
    val_set: &Subset<'_, T>,
    cfg: &TrainConfig,
    scaler: &TargetScaler,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let weights = cfg.loss_weights();
    let targets: Vec<T> = train_set.targets.iter().map(|&y| T::lit(scaler.to_model(y))).collect();
    let mut adam = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_BA7C4);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let initial = model.store.to_checkpoint();

    let restore = |model: &mut Model<T>, best: &Option<(usize, f64, Checkpoint)>| {
        let ckpt = best.as_ref().map_or(&initial, |b| &b.2);
        model.store.load_checkpoint(ckpt).expect("checkpoint from the same store");
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = Sums::default();
        for batch in order.chunks(cfg.batch_size) {
            let graphs: Vec<&FncGraph<T>> = batch.iter().map(|&i| train_set.graphs[i]).collect();
            let ts: Vec<T> = batch.iter().map(|&i| targets[i]).collect();
            let (grads, s) = batch_gradient(model, &graphs, &ts, &weights)?;
            let what = if !s.finite() {
                Some("loss")
            } else if !grads.all_finite() {
                Some("gradient")
            } else {
                None
            };
            if let Some(what) = what {
                restore(model, &best);
                return Err(TrainError::Diverged { epoch, what, history });
            }
            adam.step(&mut model.store, &grads, lr);
            sums.add(&s);
        }
        if !model.store.all_finite() {
            restore(model, &best);
            return Err(TrainError::Diverged {
                epoch,
                what: "parameter",
                history,
            });
        }
        let n = sums.count as f64;
        let (val_mse, val_corr) = if val_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let preds = predict_all(model, &val_set.graphs, scaler)?;
            let m = metrics(&preds, &val_set.targets);
            (m.mse, m.pearson_corr)
        };
        history.push(EpochRecord {
            epoch,
            lr,
            smooth_l1: sums.smooth_l1 / n,
            unit: sums.unit / n,
            tpk: sums.tpk / n,
            total: sums.total / n,
            val_mse,
            val_corr,
        });
        log::info!(
            "seed {seed} epoch {epoch}: total {:.5} val_mse {val_mse:.5} val_corr {val_corr:.4}",
            sums.total / n
        );
        // Without a validation split every epoch counts as best, keeping the last.
        let better = match &best {
            None => true,
            Some((_, b, _)) => val_mse.is_nan() || val_mse < *b,
        };
        if better {
            best = Some((epoch, val_mse, model.store.to_checkpoint()));
        }
    }
    let (best_epoch, best_val_mse) = match &best {
        Some((e, v, ckpt)) => {
            model.store.load_checkpoint(ckpt).expect("checkpoint from the same store");
            (Some(*e), *v)
        }
        None => (None, f64::NAN),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_mse,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub pearson_corr: f64,
    /// Predictions (or targets) had zero variance; the correlation is reported as 0.
    pub degenerate_variance: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let denom = (saa * sbb).sqrt();
    if !(denom > 1e-300) || saa <= 1e-24 * n * ma.abs().max(1.0).powi(2) {
        return None;
    }
    Some((sab / denom).clamp(-1.0, 1.0))
}

pub fn metrics(preds: &[f64], targets: &[f64]) -> Metrics {
    let n = preds.len().max(1) as f64;
    let mse = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    match pearson(preds, targets) {
        Some(c) => Metrics {
            mse,
            pearson_corr: c,
            degenerate_variance: false,
        },
        None => {
            log::warn!("degenerate variance in predictions; correlation reported as 0");
            Metrics {
                mse,
                pearson_corr: 0.0,
                degenerate_variance: true,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub seed: u64,
    pub target: f64,
    pub prediction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub mse: f64,
    pub pearson_corr: f64,
    pub degenerate_variance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean of the per-seed values.
    pub mse: f64,
    pub pearson_corr: f64,
    pub per_seed: Vec<SeedReport>,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn from_seeds(per_seed: Vec<SeedReport>, predictions: Vec<Prediction>) -> Self {
        let n = per_seed.len().max(1) as f64;
        Self {
            mse: per_seed.iter().map(|s| s.mse).sum::<f64>() / n,
            pearson_corr: per_seed.iter().map(|s| s.pearson_corr).sum::<f64>() / n,
            per_seed,
            predictions,
        }
    }
}

/// Scores one trained model on a split.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    set: &Subset<'_, T>,
    scaler: &TargetScaler,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let preds = predict_all(model, &set.graphs, scaler)?;
    let m = metrics(&preds, &set.targets);
    let predictions = set
        .ids
        .iter()
        .zip(&set.targets)
        .zip(&preds)
        .map(|((id, &t), &p)| Prediction {
            subject_id: id.clone(),
            seed,
            target: t,
            prediction: p,
        })
        .collect();
    Ok(EvalReport::from_seeds(
        vec![SeedReport {
            seed,
            mse: m.mse,
            pearson_corr: m.pearson_corr,
            degenerate_variance: m.degenerate_variance,
        }],
        predictions,
    ))
}
