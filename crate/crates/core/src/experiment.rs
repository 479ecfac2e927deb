//! End-to-end runs: graph construction, covariate removal, per-seed training and reporting.

use thiserror::Error;

use crate::covariates::{self, CovariateColumn, CovariateError, CovariateModel};
use crate::fnc_graph::{build_graph, FncError, FncGraph, FncMatrix};
use crate::interpret::{self, InterpretError, RoiFrequency, SubjectSelections};
use crate::model::{assemble, Model, ModelConfig, ModelError};
use crate::scalar::Scalar;
use crate::train::{self, EvalReport, Split, Subset, TargetScaler, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{ids} subject ids, {fncs} matrices, {scores} scores")]
    Lengths { ids: usize, fncs: usize, scores: usize },
    #[error("no subjects")]
    Empty,
    #[error(transparent)]
    Fnc(#[from] FncError),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
}

/// Graphs and covariate-adjusted targets with a fixed split.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub ids: Vec<String>,
    pub graphs: Vec<FncGraph<T>>,
    /// Scores after covariate removal.
    pub targets: Vec<f64>,
    pub split: Split,
    pub covariate_model: Option<CovariateModel>,
}

impl<T: Scalar> Prepared<T> {
    pub fn subset(&self, rows: &[usize]) -> Subset<'_, T> {
        Subset {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            graphs: rows.iter().map(|&i| &self.graphs[i]).collect(),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.graphs.first().map_or(0, |g| g.n_nodes())
    }
}

/// Builds graphs, splits, and regresses covariates out using train-split coefficients.
/// Graph edges are selected in double precision before conversion to `T`.
pub fn prepare<T: Scalar>(
    ids: Vec<String>,
    fncs: &[FncMatrix<f64>],
    scores: &[f64],
    covariate_columns: &[CovariateColumn],
    edge_keep_pct: f64,
    train_cfg: &TrainConfig,
) -> Result<Prepared<T>, ExperimentError> {
    let graphs = fncs
        .iter()
        .map(|f| build_graph(f, edge_keep_pct, 0.0))
        .collect::<Result<Vec<_>, _>>()?;
    prepare_graphs(ids, graphs, scores, covariate_columns, train_cfg)
}

/// Like [`prepare`] for graphs that are already built; their labels are
/// replaced by the covariate-adjusted scores.
pub fn prepare_graphs<T: Scalar>(
    ids: Vec<String>,
    graphs: Vec<FncGraph<f64>>,
    scores: &[f64],
    covariate_columns: &[CovariateColumn],
    train_cfg: &TrainConfig,
) -> Result<Prepared<T>, ExperimentError> {
    if ids.len() != graphs.len() || ids.len() != scores.len() {
        return Err(ExperimentError::Lengths {
            ids: ids.len(),
            fncs: graphs.len(),
            scores: scores.len(),
        });
    }
    if ids.is_empty() {
        return Err(ExperimentError::Empty);
    }
    let split = train::split(ids.len(), train_cfg.split_fractions, train_cfg.split_seed);
    let (targets, covariate_model) = if covariate_columns.is_empty() {
        (scores.to_vec(), None)
    } else {
        let m = covariates::fit(scores, covariate_columns, &split.train)?;
        (m.residuals(scores, covariate_columns)?, Some(m))
    };
    let graphs = graphs
        .into_iter()
        .zip(&targets)
        .map(|(mut g, &y)| {
            g.label = y;
            g.cast::<T>()
        })
        .collect();
    Ok(Prepared {
        ids,
        graphs,
        targets,
        split,
        covariate_model,
    })
}

/// One trained seed with its held-out results.
#[derive(Clone, Debug)]
pub struct SeedRun<T: Scalar> {
    pub seed: u64,
    pub model: Model<T>,
    pub scaler: TargetScaler,
    pub outcome: TrainOutcome,
    pub test: EvalReport,
}

pub fn scaler_for<T: Scalar>(train_set: &Subset<'_, T>, cfg: &TrainConfig) -> TargetScaler {
    if cfg.standardize_targets {
        TargetScaler::fit(&train_set.targets)
    } else {
        TargetScaler::identity()
    }
}

pub fn run_seed<T: Scalar>(
    data: &Prepared<T>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<SeedRun<T>, ExperimentError> {
    let train_set = data.subset(&data.split.train);
    let val_set = data.subset(&data.split.val);
    let test_rows = if data.split.test.is_empty() { &data.split.val } else { &data.split.test };
    let test_set = data.subset(test_rows);
    let scaler = scaler_for(&train_set, train_cfg);
    let mut model = assemble::<T>(model_cfg, data.n_nodes(), seed)?;
    let outcome = train::train(&mut model, &train_set, &val_set, train_cfg, &scaler, seed)?;
    let test = train::evaluate(&model, &test_set, &scaler, seed)?;
    Ok(SeedRun {
        seed,
        model,
        scaler,
        outcome,
        test,
    })
}

/// Averages per-seed test reports.
pub fn aggregate(reports: &[EvalReport]) -> EvalReport {
    EvalReport::from_seeds(
        reports.iter().flat_map(|r| r.per_seed.clone()).collect(),
        reports.iter().flat_map(|r| r.predictions.clone()).collect(),
    )
}

/// First-layer ROI frequencies of a trained model over the test split.
pub fn test_interpretation<T: Scalar>(
    data: &Prepared<T>,
    model: &Model<T>,
    labels: Option<&[String]>,
    with_attention: bool,
) -> Result<(Vec<RoiFrequency>, Vec<SubjectSelections>), ExperimentError> {
    let rows = if data.split.test.is_empty() { &data.split.val } else { &data.split.test };
    let set = data.subset(rows);
    let selections = interpret::collect_selections(model, &set.ids, &set.graphs, with_attention)?;
    let freqs = interpret::frequencies_from_selections(&selections, model.n_nodes, labels)?;
    Ok((freqs, selections))
}
