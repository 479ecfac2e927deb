//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checks;
use crate::config::{ConfigFileError, RunConfig};
use crate::covariates::CovariateModel;
use crate::data::{self, DataError, GraphRecord, LabelTable};
use crate::experiment::{self, ExperimentError, Prepared};
use crate::fnc_graph::{build_graph, FncError};
use crate::interpret::{self, InterpretError, RoiFrequency};
use crate::model::{assemble, ModelError};
use crate::readout::ReadoutKind;
use crate::rgin::AggregationMode;
use crate::scalar::Scalar;
use crate::synth::{self, SynthError};
use crate::tensor::{Checkpoint, TensorError};
use crate::train::{self, EpochRecord, EvalReport, Precision, TargetScaler, TrainError};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ROI_FREQ_FILE: &str = "roi_freq.csv";
pub const TOP_ROIS_FILE: &str = "top_rois.json";
pub const SELECTIONS_FILE: &str = "selections.jsonl";
pub const SIGNAL_FILE: &str = "signal.json";

#[derive(Debug, Parser)]
#[command(name = "brainrgin", version, about = "ROI-aware graph isomorphism networks for brain connectivity regression")]
pub struct Cli {
    /// Log progress (repeat for more detail)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a planted connectivity signal
    Synth(SynthArgs),
    /// Build the connectivity graph store from subject files
    BuildGraphs(BuildArgs),
    /// Train one model per seed
    Train(TrainArgs),
    /// Score trained models on the test split
    Evaluate(EvalArgs),
    /// Rank ROIs by how often the first pooling layer keeps them
    Interpret(InterpretArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration file (TOML)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Seed; for train, evaluate and interpret it replaces the configured seed list
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (1 forces serial execution)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory (labels.csv, subjects/, optional rois.csv and graphs.jsonl)
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Fraction of strongest connections kept as edges, in (0, 1]
    #[arg(long, value_name = "FRACTION")]
    pub edge_keep_pct: Option<f64>,
    /// Label column used as the regression target
    #[arg(long, value_name = "COLUMN")]
    pub target: Option<String>,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    /// Graph readout
    #[arg(long, value_parser = ["sero", "garo", "meanmax"])]
    pub readout: Option<String>,
    /// Neighbor aggregation
    #[arg(long, value_parser = ["sum", "mean"])]
    pub aggregation: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of subjects
    #[arg(long, value_name = "N")]
    pub subjects: Option<usize>,
    /// Samples per region time series
    #[arg(long, value_name = "T")]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Number of training epochs
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Write per-subject readout attention and pooling records
    #[arg(long)]
    pub emit_attention: bool,
}

#[derive(Debug, Args)]
pub struct InterpretArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Minimum first-layer keep frequency of a top ROI, in (0, 1]
    #[arg(long, value_name = "FRACTION")]
    pub threshold: Option<f64>,
    /// Include readout attention in the per-subject pooling records
    #[arg(long)]
    pub emit_attention: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// First seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check
    #[arg(long, default_value_t = 1, value_name = "N")]
    pub repeats: u64,
    /// Worker threads (1 forces serial execution)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Also write the table as CSV to this directory
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigFileError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Fnc(#[from] FncError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(ConfigFileError::Read { .. } | ConfigFileError::Parse { .. }) => 2,
            _ => 1,
        }
    }
}

/// Split, covariate fit and target scaling shared by all seeds of a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub split: train::Split,
    pub covariate_model: Option<CovariateModel>,
    pub scaler: TargetScaler,
    pub seeds: Vec<u64>,
}

/// Trained parameters of one seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub seed: u64,
    pub precision: Precision,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub scaler: TargetScaler,
    pub params: Checkpoint,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    match threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

pub fn execute(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Synth(a) => {
            let threads = a.common.threads;
            with_threads(threads, || cmd_synth(a))?
        }
        Command::BuildGraphs(a) => {
            let threads = a.common.threads;
            with_threads(threads, || cmd_build(a))?
        }
        Command::Train(a) => {
            let threads = a.common.threads;
            with_threads(threads, || cmd_train(a))?
        }
        Command::Evaluate(a) => {
            let threads = a.common.threads;
            with_threads(threads, || cmd_evaluate(a))?
        }
        Command::Interpret(a) => {
            let threads = a.common.threads;
            with_threads(threads, || cmd_interpret(a))?
        }
        Command::Gradcheck(a) => {
            let threads = a.threads;
            with_threads(threads, || cmd_gradcheck(a))?
        }
    }
}

/// Config file (or, failing that, the one saved in `fallback_dir`), then flag overrides.
fn load_config(common: &CommonArgs, fallback_dir: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = match (&common.config, fallback_dir.map(|d| d.join(CONFIG_FILE))) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(saved)) if saved.is_file() => RunConfig::load(&saved)?,
        _ => RunConfig::default(),
    };
    if let Some(dir) = &common.out_dir {
        cfg.data.out_dir = Some(dir.clone());
    }
    Ok(cfg)
}

fn apply_data_args(cfg: &mut RunConfig, a: &DataArgs) -> Result<(), CliError> {
    if let Some(d) = &a.data_dir {
        cfg.data.data_dir = Some(d.clone());
    }
    if let Some(p) = a.edge_keep_pct {
        if !(p > 0.0 && p <= 1.0) {
            return Err(CliError::Usage(format!("--edge-keep-pct must lie in (0, 1], got {p}")));
        }
        cfg.model.edge_keep_pct = p;
    }
    if let Some(t) = &a.target {
        cfg.data.target = t.clone();
    }
    Ok(())
}

fn apply_seed(cfg: &mut RunConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.train.seeds = vec![s];
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.data
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("--out-dir is required".into()))
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.data
        .data_dir
        .clone()
        .ok_or_else(|| CliError::Usage("--data-dir is required".into()))
}

fn save_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    data::ensure_dir(dir)?;
    data::write_text(&dir.join(CONFIG_FILE), &cfg.to_toml()?)?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<i32, CliError> {
    let mut cfg = load_config(&a.common, None)?;
    if let Some(s) = a.common.seed {
        cfg.synth.generator.seed = s;
    }
    if let Some(n) = a.subjects {
        cfg.synth.generator.n_subjects = n;
    }
    if let Some(t) = a.samples {
        cfg.synth.generator.t_samples = t;
    }
    let out = out_dir(&cfg)?;
    let mut spec = cfg.synth.signal.clone();
    if let Some(r2) = cfg.synth.target_r2 {
        spec.noise_sd = synth::calibrate_noise_sd(&cfg.synth.generator, &spec, r2, 1000)?;
        cfg.synth.signal.noise_sd = spec.noise_sd;
        cfg.synth.target_r2 = None;
    }
    let dataset = synth::generate(&cfg.synth.generator, &spec)?;
    let subjects_dir = out.join(data::SUBJECTS_DIR);
    data::ensure_dir(&subjects_dir)?;
    for s in &dataset.subjects {
        data::write_matrix_csv(&subjects_dir.join(format!("{}.csv", s.id)), &s.series)?;
    }
    let labels = LabelTable {
        subject_ids: dataset.subjects.iter().map(|s| s.id.clone()).collect(),
        columns: vec![
            ("score".into(), dataset.subjects.iter().map(|s| format!("{:?}", s.score)).collect()),
            ("age".into(), dataset.subjects.iter().map(|s| format!("{:?}", s.age)).collect()),
            ("site".into(), dataset.subjects.iter().map(|s| s.site.clone()).collect()),
        ],
    };
    labels.write(&out.join(data::LABELS_FILE))?;
    let n = cfg.synth.generator.n_regions;
    let roi_labels: Vec<String> = (0..n)
        .map(|i| {
            if spec.salient_rois.contains(&i) {
                format!("salient_{i}")
            } else {
                format!("region_{i}")
            }
        })
        .collect();
    data::write_roi_labels(&out.join(data::ROIS_FILE), &roi_labels)?;
    data::write_json(
        &out.join(SIGNAL_FILE),
        &serde_json::json!({
            "salient_rois": spec.salient_rois,
            "noise_sd": spec.noise_sd,
            "salient_mean_abs_fnc": dataset.salient_mean_abs,
            "background_mean_abs_fnc": dataset.background_mean_abs,
        }),
    )?;
    save_config(&cfg, &out)?;
    println!("wrote {} subjects to {}", dataset.subjects.len(), out.display());
    Ok(0)
}

/// Graphs in label order, from a graph store in the data directory or built from subject files.
fn load_graphs(cfg: &RunConfig, labels: &LabelTable) -> Result<Vec<crate::fnc_graph::FncGraph<f64>>, CliError> {
    let dir = data_dir(cfg)?;
    let store = dir.join(data::GRAPHS_FILE);
    if store.is_file() {
        return Ok(data::graphs_for_labels(data::read_graphs(&store)?, labels)?);
    }
    let fncs = data::load_subject_fncs(&dir, labels)?;
    Ok(fncs
        .iter()
        .map(|f| build_graph(f, cfg.model.edge_keep_pct, 0.0))
        .collect::<Result<_, _>>()?)
}

fn cmd_build(a: BuildArgs) -> Result<i32, CliError> {
    let mut cfg = load_config(&a.common, None)?;
    apply_data_args(&mut cfg, &a.data)?;
    let out = out_dir(&cfg)?;
    let dir = data_dir(&cfg)?;
    let labels = LabelTable::read(&dir.join(data::LABELS_FILE))?;
    let scores = labels.numeric(&cfg.data.target)?;
    let fncs = data::load_subject_fncs(&dir, &labels)?;
    let records: Vec<GraphRecord> = labels
        .subject_ids
        .iter()
        .zip(&fncs)
        .zip(&scores)
        .map(|((id, f), &y)| build_graph(f, cfg.model.edge_keep_pct, y).map(|g| GraphRecord::from_graph(id, &g)))
        .collect::<Result<_, _>>()?;
    data::ensure_dir(&out)?;
    data::write_graphs(&out.join(data::GRAPHS_FILE), &records)?;
    save_config(&cfg, &out)?;
    println!("wrote {} graphs to {}", records.len(), out.join(data::GRAPHS_FILE).display());
    Ok(0)
}

fn prepare_run<T: Scalar>(cfg: &RunConfig) -> Result<(Prepared<T>, Option<Vec<String>>), CliError> {
    let dir = data_dir(cfg)?;
    let labels = LabelTable::read(&dir.join(data::LABELS_FILE))?;
    let scores = labels.numeric(&cfg.data.target)?;
    let covariates = if cfg.data.regress_covariates {
        labels.covariates(&cfg.data.target, cfg.data.covariates.as_deref())?
    } else {
        Vec::new()
    };
    let graphs = load_graphs(cfg, &labels)?;
    let prepared = experiment::prepare_graphs::<T>(labels.subject_ids.clone(), graphs, &scores, &covariates, &cfg.train)?;
    let n = prepared.n_nodes();
    let roi_file = dir.join(data::ROIS_FILE);
    let roi_labels = if roi_file.is_file() {
        Some(data::read_roi_labels(&roi_file, n)?)
    } else {
        None
    };
    Ok((prepared, roi_labels))
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if history.is_empty() {
        w.write_record(["epoch", "lr", "smooth_l1", "unit", "tpk", "total", "val_mse", "val_corr"])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    for h in history {
        w.serialize(h).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

fn cmd_train(a: TrainArgs) -> Result<i32, CliError> {
    let mut cfg = load_config(&a.common, None)?;
    apply_data_args(&mut cfg, &a.data)?;
    apply_seed(&mut cfg, a.common.seed);
    if let Some(r) = &a.arch.readout {
        cfg.model.readout = r.parse::<ReadoutKind>().map_err(CliError::Usage)?;
    }
    if let Some(g) = &a.arch.aggregation {
        cfg.model.aggregation = g.parse::<AggregationMode>().map_err(CliError::Usage)?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    match cfg.train.precision {
        Precision::F32 => train_seeds::<f32>(&cfg),
        Precision::F64 => train_seeds::<f64>(&cfg),
    }
}

fn train_seeds<T: Scalar>(cfg: &RunConfig) -> Result<i32, CliError> {
    let out = out_dir(cfg)?;
    let (prepared, _) = prepare_run::<T>(cfg)?;
    save_config(cfg, &out)?;
    let train_set = prepared.subset(&prepared.split.train);
    let scaler = experiment::scaler_for(&train_set, &cfg.train);
    data::write_json(
        &out.join(RUN_FILE),
        &RunRecord {
            split: prepared.split.clone(),
            covariate_model: prepared.covariate_model.clone(),
            scaler,
            seeds: cfg.train.seeds.clone(),
        },
    )?;
    let val_set = prepared.subset(&prepared.split.val);
    for &seed in &cfg.train.seeds {
        let mut model = assemble::<T>(&cfg.model, prepared.n_nodes(), seed)?;
        let dir = seed_dir(&out, seed);
        data::ensure_dir(&dir)?;
        let result = train::train(&mut model, &train_set, &val_set, &cfg.train, &scaler, seed);
        let (history, best_epoch, best_val, failure) = match result {
            Ok(o) => (o.history, o.best_epoch, o.best_val_mse, None),
            Err(TrainError::Diverged { epoch, what, history }) => {
                let msg = format!("seed {seed}: training diverged at epoch {epoch} (non-finite {what})");
                (history, None, f64::NAN, Some(msg))
            }
            Err(e) => return Err(e.into()),
        };
        write_history(&dir.join(HISTORY_FILE), &history)?;
        data::write_json(
            &dir.join(CHECKPOINT_FILE),
            &ModelArtifact {
                seed,
                precision: cfg.train.precision,
                best_epoch,
                best_val_mse: best_val.is_finite().then_some(best_val),
                scaler,
                params: model.store.to_checkpoint(),
            },
        )?;
        if let Some(msg) = failure {
            return Err(CliError::Runtime(msg));
        }
        println!(
            "seed {seed}: best epoch {} val_mse {}",
            best_epoch.map_or("-".to_string(), |e| e.to_string()),
            if best_val.is_finite() { format!("{best_val:.6}") } else { "-".into() }
        );
    }
    Ok(0)
}

fn load_model<T: Scalar>(cfg: &RunConfig, out: &Path, seed: u64, n_nodes: usize) -> Result<(crate::model::Model<T>, TargetScaler), CliError> {
    let path = seed_dir(out, seed).join(CHECKPOINT_FILE);
    if !path.is_file() {
        return Err(CliError::Runtime(format!("no checkpoint for seed {seed} at {}; run train first", path.display())));
    }
    let artifact: ModelArtifact = data::read_json(&path)?;
    let mut model = assemble::<T>(&cfg.model, n_nodes, seed)?;
    model.store.load_checkpoint(&artifact.params)?;
    Ok((model, artifact.scaler))
}

fn eval_config(common: &CommonArgs, data_args: &DataArgs) -> Result<(RunConfig, PathBuf), CliError> {
    let out = common
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("--out-dir is required".into()))?;
    let mut cfg = load_config(common, Some(&out))?;
    apply_data_args(&mut cfg, data_args)?;
    apply_seed(&mut cfg, common.seed);
    Ok((cfg, out))
}

fn cmd_evaluate(a: EvalArgs) -> Result<i32, CliError> {
    let (cfg, out) = eval_config(&a.common, &a.data)?;
    match cfg.train.precision {
        Precision::F32 => evaluate_seeds::<f32>(&cfg, &out, a.emit_attention),
        Precision::F64 => evaluate_seeds::<f64>(&cfg, &out, a.emit_attention),
    }
}

fn test_rows(p: &Prepared<impl Scalar>) -> Vec<usize> {
    if p.split.test.is_empty() {
        p.split.val.clone()
    } else {
        p.split.test.clone()
    }
}

fn write_selections(path: &Path, records: &[interpret::SubjectSelections]) -> Result<(), CliError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::Runtime(e.to_string()))?);
        text.push('\n');
    }
    Ok(data::write_text(path, &text)?)
}

fn evaluate_seeds<T: Scalar>(cfg: &RunConfig, out: &Path, emit_attention: bool) -> Result<i32, CliError> {
    let (prepared, _) = prepare_run::<T>(cfg)?;
    let set = prepared.subset(&test_rows(&prepared));
    let mut reports = Vec::new();
    for &seed in &cfg.train.seeds {
        let (model, scaler) = load_model::<T>(cfg, out, seed, prepared.n_nodes())?;
        let report = train::evaluate(&model, &set, &scaler, seed)?;
        println!("seed {seed}: mse {:.6} pearson_corr {:.4}", report.mse, report.pearson_corr);
        reports.push(report);
        if emit_attention {
            let sel = interpret::collect_selections(&model, &set.ids, &set.graphs, true)?;
            write_selections(&seed_dir(out, seed).join(SELECTIONS_FILE), &sel)?;
        }
    }
    let report: EvalReport = experiment::aggregate(&reports);
    data::write_json(&out.join(REPORT_FILE), &report)?;
    println!("mean over {} seeds: mse {:.6} pearson_corr {:.4}", reports.len(), report.mse, report.pearson_corr);
    Ok(0)
}

fn write_freqs(path: &Path, freqs: &[RoiFrequency]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    for f in freqs {
        w.serialize(f).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

fn cmd_interpret(a: InterpretArgs) -> Result<i32, CliError> {
    let (mut cfg, out) = eval_config(&a.common, &a.data)?;
    if let Some(t) = a.threshold {
        if !(t > 0.0 && t <= 1.0) {
            return Err(CliError::Usage(format!("--threshold must lie in (0, 1], got {t}")));
        }
        cfg.interpret.threshold = t;
    }
    if a.emit_attention {
        cfg.interpret.emit_attention = true;
    }
    match cfg.train.precision {
        Precision::F32 => interpret_seeds::<f32>(&cfg, &out),
        Precision::F64 => interpret_seeds::<f64>(&cfg, &out),
    }
}

fn interpret_seeds<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<i32, CliError> {
    let (prepared, roi_labels) = prepare_run::<T>(cfg)?;
    let set = prepared.subset(&test_rows(&prepared));
    let labels = roi_labels.as_deref();
    let mut mean: Vec<RoiFrequency> = Vec::new();
    for &seed in &cfg.train.seeds {
        let (model, _) = load_model::<T>(cfg, out, seed, prepared.n_nodes())?;
        let sel = interpret::collect_selections(&model, &set.ids, &set.graphs, cfg.interpret.emit_attention)?;
        let freqs = interpret::frequencies_from_selections(&sel, model.n_nodes, labels)?;
        let dir = seed_dir(out, seed);
        write_selections(&dir.join(SELECTIONS_FILE), &sel)?;
        write_freqs(&dir.join(ROI_FREQ_FILE), &freqs)?;
        data::write_json(&dir.join(TOP_ROIS_FILE), &interpret::top_rois(&freqs, cfg.interpret.threshold)?)?;
        if mean.is_empty() {
            mean = freqs;
        } else {
            for (m, f) in mean.iter_mut().zip(&freqs) {
                m.freq += f.freq;
            }
        }
    }
    let n = cfg.train.seeds.len() as f64;
    mean.iter_mut().for_each(|m| m.freq /= n);
    let top = interpret::top_rois(&mean, cfg.interpret.threshold)?;
    write_freqs(&out.join(ROI_FREQ_FILE), &mean)?;
    data::write_json(&out.join(TOP_ROIS_FILE), &top)?;
    println!(
        "{} ROIs at frequency >= {}: {:?}",
        top.len(),
        cfg.interpret.threshold,
        top.iter().map(|r| r.roi_id).collect::<Vec<_>>()
    );
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32, CliError> {
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let seeds: Vec<u64> = (a.seed..a.seed + a.repeats).collect();
    let rows = checks::run_all(&seeds)?;
    print!("{}", checks::format_table(&rows));
    if let Some(dir) = &a.out_dir {
        data::ensure_dir(dir)?;
        let path = dir.join("gradcheck.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
        for r in &rows {
            w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        eprintln!("{failed} check(s) above {:e}", checks::TOLERANCE);
        return Ok(1);
    }
    Ok(0)
}
