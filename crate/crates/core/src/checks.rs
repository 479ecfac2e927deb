//! Finite-difference gradient checks of every differentiable module.
//!
//! Each check builds a small random instance, reduces the module output to a
//! scalar with a fixed random weighting (so no gradient entry is trivially
//! tiny), and compares the tape gradient with central differences.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fnc_graph::{build_graph, pearson_fnc, FncGraph, TimeSeries};
use crate::losses::{self, LossWeights, UnitLossForm};
use crate::model::{assemble, graph_objective, ModelConfig};
use crate::pool::PoolLayer;
use crate::readout::{self, GaroReadout, ReadoutKind, SeroReadout};
use crate::rgin::{AggregationMode, RginLayer};
use crate::tensor::{grad_check, ParamStore, Tape, TensorError, Var};

pub const FD_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub module: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub entries: usize,
    pub worst: Option<String>,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

pub const MODULES: [&str; 13] = [
    "rgin_sum",
    "rgin_mean",
    "pool_gate",
    "sero",
    "garo",
    "meanmax",
    "smooth_l1",
    "unit_loss",
    "unit_loss_abs",
    "tpk_loss",
    "model_sero",
    "model_garo",
    "model_meanmax",
];

fn random_matrix(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-scale..scale))
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        let shape = p.shape();
        p.data = random_matrix(rng, shape, 0.6);
    }
}

pub fn random_graph(n: usize, keep_pct: f64, rng: &mut ChaCha8Rng) -> FncGraph<f64> {
    let values = random_matrix(rng, (n, 3 * n + 3), 1.0);
    let fnc = pearson_fnc(&TimeSeries::from_values(values).expect("valid series")).expect("nonconstant rows");
    build_graph(&fnc, keep_pct, rng.gen_range(-1.0..1.0)).expect("valid threshold")
}

/// `sum(out .* w)` for a fixed random `w`.
fn project(tape: &mut Tape<'_, f64>, out: Var, w: &Array2<f64>) -> Result<Var, TensorError> {
    let c = tape.constant(w.clone());
    let prod = tape.mul(out, c)?;
    Ok(tape.sum(prod))
}

fn row(module: &str, seed: u64, store: &mut ParamStore<f64>, f: impl for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var, TensorError>) -> Result<GradCheckRow, TensorError> {
    let report = grad_check(store, FD_EPS, f)?;
    Ok(GradCheckRow {
        module: module.to_string(),
        seed,
        max_rel_error: report.max_rel_error,
        entries: report.entries_checked,
        worst: report.worst.map(|(name, i)| format!("{name}[{i}]")),
    })
}

fn err(e: impl std::fmt::Display) -> TensorError {
    TensorError::NonFinite(e.to_string())
}

/// Runs the named check at `seed`.
pub fn check_module(module: &str, seed: u64) -> Result<GradCheckRow, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(module.len() as u64));
    let mut store = ParamStore::<f64>::new();
    match module {
        "rgin_sum" | "rgin_mean" => {
            let mode = if module == "rgin_sum" { AggregationMode::Sum } else { AggregationMode::Mean };
            let (n, d_out) = (6, 4);
            let g = random_graph(n, 0.6, &mut rng);
            let layer = RginLayer::new(&mut store, "conv", n, n, d_out, 3, seed);
            randomize(&mut store, &mut rng);
            let h = store.add("h", g.node_features.clone());
            let w = random_matrix(&mut rng, (n, d_out), 1.0);
            row(module, seed, &mut store, |tape| {
                let hv = tape.param(h);
                let out = layer.forward(tape, hv, &g.edges, &g.roi_ids, mode).map_err(err)?;
                project(tape, out, &w)
            })
        }
        "pool_gate" => {
            let (n, d) = (7, 4);
            let g = random_graph(n, 0.5, &mut rng);
            let pool = PoolLayer::new(&mut store, "pool", d, 0.5, seed).map_err(err)?;
            randomize(&mut store, &mut rng);
            let h = store.add("h", random_matrix(&mut rng, (n, d), 1.0));
            let k = pool.keep_count(n);
            let w = random_matrix(&mut rng, (k, d), 1.0);
            let wg = random_matrix(&mut rng, (n, 1), 1.0);
            row(module, seed, &mut store, |tape| {
                let hv = tape.param(h);
                let out = pool.forward(tape, hv, &g.edges, &g.roi_ids).map_err(err)?;
                let a = project(tape, out.h, &w)?;
                let b = project(tape, out.gate, &wg)?;
                tape.add(a, b)
            })
        }
        "sero" | "garo" | "meanmax" => {
            let (n, d) = (5, 4);
            let r = match module {
                "sero" => readout::Readout::Sero(SeroReadout::new(&mut store, "r", d, n, seed)),
                "garo" => readout::Readout::Garo(GaroReadout::new(&mut store, "r", d, seed)),
                _ => readout::Readout::new(ReadoutKind::Meanmax, &mut store, "r", d, n, seed),
            };
            randomize(&mut store, &mut rng);
            let h = store.add("h", random_matrix(&mut rng, (n, d), 1.0));
            let w = random_matrix(&mut rng, (1, r.summary_len()), 1.0);
            let wz = random_matrix(&mut rng, (n, 1), 1.0);
            row(module, seed, &mut store, |tape| {
                let hv = tape.param(h);
                let out = r.forward(tape, hv)?;
                let mut total = project(tape, out.summary, &w)?;
                if let Some(z) = out.z_space {
                    let extra = project(tape, z, &wz)?;
                    total = tape.add(total, extra)?;
                }
                Ok(total)
            })
        }
        "smooth_l1" => {
            // Differences kept away from the |d| = 1 branch point.
            let m = 6;
            let targets: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let preds = Array2::from_shape_fn((m, 1), |(i, _)| {
                let mag = if i % 2 == 0 { rng.gen_range(0.1..0.8) } else { rng.gen_range(1.2..2.5) };
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                targets[i] + sign * mag
            });
            let p = store.add("pred", preds);
            row(module, seed, &mut store, |tape| {
                let pv = tape.param(p);
                losses::smooth_l1_var(tape, pv, &targets).map_err(err)
            })
        }
        "unit_loss" | "unit_loss_abs" => {
            let form = if module == "unit_loss" { UnitLossForm::Signed } else { UnitLossForm::Abs };
            let mut omega = random_matrix(&mut rng, (5, 1), 1.0);
            // Keep | ||w|| - 1 | away from its kink.
            let norm = omega.iter().map(|v| v * v).sum::<f64>().sqrt();
            let target = if rng.gen_bool(0.5) { rng.gen_range(0.3..0.8) } else { rng.gen_range(1.2..2.0) };
            omega.mapv_inplace(|v| v * target / norm);
            let o = store.add("omega", omega);
            row(module, seed, &mut store, |tape| {
                let ov = tape.param(o);
                Ok(losses::unit_loss_var(tape, ov, form))
            })
        }
        "tpk_loss" => {
            let n = 8;
            let logits = store.add("logits", random_matrix(&mut rng, (n, 1), 2.0));
            row(module, seed, &mut store, |tape| {
                let l = tape.param(logits);
                let s = tape.sigmoid(l);
                losses::tpk_loss_var(tape, s, 3).map_err(err)
            })
        }
        "model_sero" | "model_garo" | "model_meanmax" => {
            let kind = match module {
                "model_sero" => ReadoutKind::Sero,
                "model_garo" => ReadoutKind::Garo,
                _ => ReadoutKind::Meanmax,
            };
            let cfg = ModelConfig {
                layer_dims: [4, 5, 6],
                pool_ratios: [0.6, 0.6, 0.6],
                clusters_k: 3,
                readout: kind,
                ..ModelConfig::default()
            };
            let n = 8;
            let graphs: Vec<FncGraph<f64>> = (0..2).map(|_| random_graph(n, 0.5, &mut rng)).collect();
            let mut model = assemble::<f64>(&cfg, n, seed).map_err(err)?;
            randomize(&mut model.store, &mut rng);
            let weights = LossWeights {
                lambda1: 0.1,
                unit_form: UnitLossForm::Signed,
            };
            let scale = 1.0 / graphs.len() as f64;
            let mut store = std::mem::take(&mut model.store);
            let arch = model;
            row(module, seed, &mut store, |tape| {
                let mut total: Option<Var> = None;
                for g in &graphs {
                    let obj = graph_objective(tape, &arch, g, g.label, &weights).map_err(err)?;
                    let part = tape.scale(obj.loss, scale);
                    total = Some(match total {
                        Some(t) => tape.add(t, part)?,
                        None => part,
                    });
                }
                total.ok_or(TensorError::Empty("model batch"))
            })
        }
        other => Err(TensorError::NonFinite(format!("unknown module `{other}`"))),
    }
}

/// Every module at every seed.
pub fn run_all(seeds: &[u64]) -> Result<Vec<GradCheckRow>, TensorError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for m in MODULES {
            rows.push(check_module(m, seed)?);
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[GradCheckRow]) -> String {
    let mut out = format!("{:<14} {:>6} {:>8} {:>12}  {}\n", "module", "seed", "entries", "max_rel_err", "status");
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>6} {:>8} {:>12.3e}  {}\n",
            r.module,
            r.seed,
            r.entries,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}
