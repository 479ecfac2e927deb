//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=A4,A6` restricts the run to the listed criteria.

use std::io::Write;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use brainrgin::checks;
use brainrgin::covariates::CovariateColumn;
use brainrgin::experiment::{prepare, run_seed, test_interpretation};
use brainrgin::fnc_graph::{build_graph, pearson_fnc, Edge, FncGraph, TimeSeries};
use brainrgin::interpret::top_rois;
use brainrgin::losses::{self, smooth_l1, tpk_loss, unit_loss, LossWeights, UnitLossForm};
use brainrgin::model::ModelConfig;
use brainrgin::pool::{induced_edges, keep_count, select_topk};
use brainrgin::readout::{GaroReadout, Readout, ReadoutKind, SeroReadout};
use brainrgin::rgin::{AggregationMode, RginLayer};
use brainrgin::synth::{calibrate_noise_sd, generate, GeneratorConfig, SignalSpec};
use brainrgin::tensor::{ParamStore, Tape};
use brainrgin::train::TrainConfig;
use ndarray::{array, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn matrix(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-scale..scale))
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, keep: f64) -> FncGraph<f64> {
    let ts = TimeSeries::from_values(matrix(rng, (n, 3 * n + 3), 1.0)).unwrap();
    build_graph(&pearson_fnc(&ts).unwrap(), keep, 0.0).unwrap()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn a1() -> Outcome {
    let start = Instant::now();
    let rows = checks::run_all(&[0, 1, 2, 3, 4]).unwrap();
    let elapsed = start.elapsed();
    let worst = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed = rows.iter().filter(|r| !r.passed()).count();
    outcome(
        failed == 0 && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, {failed} above 1e-4, worst {:.2e} ({} seed {}), {:.1}s",
            rows.len(),
            worst.max_rel_error,
            worst.module,
            worst.seed,
            elapsed.as_secs_f64()
        ),
    )
}

/// Shared 2000-subject planted-signal experiment behind A2 and A3.
struct LearnRun {
    corrs: Vec<f64>,
    recovered: Vec<f64>,
    elapsed: Duration,
}

fn learn_run() -> LearnRun {
    let start = Instant::now();
    let gen = GeneratorConfig { seed: 11, ..GeneratorConfig::default() };
    let mut spec = SignalSpec::default();
    spec.noise_sd = calibrate_noise_sd(&gen, &spec, 0.5, 1000).unwrap();
    let data = generate(&gen, &spec).unwrap();
    let ids = data.subjects.iter().map(|s| s.id.clone()).collect();
    let fncs: Vec<_> = data.subjects.iter().map(|s| s.fnc.clone()).collect();
    let scores: Vec<f64> = data.subjects.iter().map(|s| s.score).collect();
    let ages: Vec<f64> = data.subjects.iter().map(|s| s.age).collect();
    let cov = vec![
        CovariateColumn::numeric("age", &ages),
        CovariateColumn::new("site", data.subjects.iter().map(|s| s.site.clone()).collect()),
    ];
    let tc = TrainConfig::default();
    let model = ModelConfig::default();
    let prep = prepare::<f32>(ids, &fncs, &scores, &cov, model.edge_keep_pct, &tc).unwrap();
    let (mut corrs, mut recovered) = (vec![], vec![]);
    for &seed in &tc.seeds {
        let run = run_seed(&prep, &model, &tc, seed).unwrap();
        let (freqs, _) = test_interpretation(&prep, &run.model, None, false).unwrap();
        let top = top_rois(&freqs, 0.9).unwrap();
        let hits = spec.salient_rois.iter().filter(|r| top.iter().any(|t| t.roi_id == **r)).count();
        corrs.push(run.test.pearson_corr);
        recovered.push(hits as f64 / spec.salient_rois.len() as f64);
        let _ = writeln!(
            std::io::stderr(),
            "  seed {seed}: test corr {:.4}, best epoch {:?}, top rois {:?}",
            run.test.pearson_corr,
            run.outcome.best_epoch,
            top.iter().map(|t| t.roi_id).collect::<Vec<_>>()
        );
    }
    LearnRun {
        corrs,
        recovered,
        elapsed: start.elapsed(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn a2(run: &LearnRun) -> Outcome {
    let m = mean(&run.corrs);
    outcome(
        m >= 0.35 && run.elapsed < Duration::from_secs(15 * 60),
        format!("mean test corr {m:.4} over seeds {:?}, {:.0}s", run.corrs, run.elapsed.as_secs_f64()),
    )
}

fn a3(run: &LearnRun) -> Outcome {
    let m = mean(&run.recovered);
    outcome(m >= 0.6, format!("mean salient recovery {m:.3}, per seed {:?}", run.recovered))
}

fn a4() -> Outcome {
    let mut notes = vec![];
    let mut ok = true;
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        let pass = (got - want).abs() <= tol;
        ok &= pass;
        notes.push(format!("{name}={got:.6}"));
    };
    check("smooth_l1(0.5)", smooth_l1(0.5, 0.0), 0.125, 1e-12);
    check("smooth_l1(2)", smooth_l1(2.0, 0.0), 1.5, 1e-12);
    check("smooth_l1(1)", smooth_l1(1.0, 0.0), 0.5, 1e-12);
    check("unit((3,4))", unit_loss(&[3.0, 4.0], UnitLossForm::Signed), 4.0, 1e-12);
    check("tpk", tpk_loss(Array2::from_elem((1, 4), 0.5).view(), 2).unwrap(), 1.7329, 1e-3);

    let preds = [0.3, -1.0, 2.2];
    let targets = [0.0, 0.5, -0.4];
    let omegas = vec![vec![0.6, 0.8, 0.1], vec![1.5, -0.2]];
    let scores = vec![(array![[0.9, 0.7, 0.4, 0.2]], 2), (array![[0.8, 0.3, 0.1]], 1)];
    let weights = LossWeights { lambda1: 0.1, unit_form: UnitLossForm::Signed };
    let b = losses::total_loss(&preds, &targets, &omegas, &scores, &weights).unwrap();
    let parts = b.smooth_l1 + b.unit + weights.lambda1 * b.tpk;
    check("total-sum", b.total - parts, 0.0, 1e-12);
    outcome(ok, notes.join(", "))
}

fn a5() -> Outcome {
    let counts: Vec<usize> = [0.38, 0.46, 0.78].iter().map(|&r| keep_count(r, 53)).collect();
    let mut r = rng(55);
    let selected_ok = [0.38, 0.46, 0.78].iter().all(|&ratio| {
        let s: Vec<f64> = (0..53).map(|_| r.gen()).collect();
        select_topk(&s, ratio).len() == keep_count(ratio, 53)
    });
    let mut induced_ok = 0;
    for _ in 0..50 {
        let keep = r.gen_range(0.2..1.0);
        let g = random_graph(&mut r, 8, keep);
        let mut kept: Vec<usize> = (0..8).collect();
        kept.shuffle(&mut r);
        kept.truncate(r.gen_range(1..=8));
        kept.sort_unstable();
        let mut oracle = vec![];
        for e in &g.edges {
            if let (Some(s), Some(d)) = (kept.iter().position(|&k| k == e.src), kept.iter().position(|&k| k == e.dst)) {
                oracle.push((s, d, e.weight));
            }
        }
        let got: Vec<_> = induced_edges(&g.edges, &kept, 8).iter().map(|e| (e.src, e.dst, e.weight)).collect();
        induced_ok += usize::from(got == oracle);
    }
    let mut fnc_ok = 0;
    for _ in 0..100 {
        let n = r.gen_range(2..20);
        let t = r.gen_range(n + 1..3 * n + 5);
        let f = pearson_fnc(&TimeSeries::from_values(matrix(&mut r, (n, t), 3.0)).unwrap()).unwrap();
        let good = (0..n).all(|i| f.get(i, i) == 1.0 && (0..n).all(|j| f.get(i, j) == f.get(j, i)));
        fnc_ok += usize::from(good);
    }
    outcome(
        counts == [21, 25, 42] && selected_ok && induced_ok == 50 && fnc_ok == 100,
        format!("keep counts {counts:?}, induced {induced_ok}/50, fnc {fnc_ok}/100"),
    )
}

fn randomize(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        let shape = p.shape();
        p.data = matrix(r, shape, 0.8);
    }
}

fn a6() -> Outcome {
    let (n, d) = (10, 6);
    let mut r = rng(66);
    let mut store = ParamStore::new();
    let conv = RginLayer::new(&mut store, "conv", n, n, d, 4, 1);
    let garo = Readout::Garo(GaroReadout::new(&mut store, "garo", d, 2));
    let meanmax = Readout::new(ReadoutKind::Meanmax, &mut store, "mm", n, n, 3);
    let sero = Readout::Sero(SeroReadout::new(&mut store, "sero", d, n, 4));
    randomize(&mut store, &mut r);
    let g = random_graph(&mut r, n, 0.4);
    let eval = |graph: &FncGraph<f64>| {
        let mut tape = Tape::new(&store);
        let h = tape.constant(graph.node_features.clone());
        let z = conv.forward(&mut tape, h, &graph.edges, &graph.roi_ids, AggregationMode::Sum).unwrap();
        let mut summary = |ro: &Readout, x| {
            let s = ro.forward(&mut tape, x).unwrap().summary;
            tape.value(s).to_owned()
        };
        // meanmax sees the layer input directly, so its exactness is not masked by conv rounding.
        vec![summary(&garo, z), summary(&meanmax, h), summary(&sero, z)]
    };
    let base = eval(&g);
    let (mut garo_worst, mut meanmax_exact, mut sero_min) = (0.0f64, true, f64::INFINITY);
    let mut perms = 0;
    while perms < 20 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            continue;
        }
        perms += 1;
        let out = eval(&g.permuted(&perm));
        garo_worst = garo_worst.max(max_abs_diff(&base[0], &out[0]));
        meanmax_exact &= base[1] == out[1];
        sero_min = sero_min.min(max_abs_diff(&base[2], &out[2]));
    }
    outcome(
        garo_worst <= 1e-12 && meanmax_exact && sero_min > 1e-6,
        format!("rgin+garo max diff {garo_worst:.2e}, meanmax invariant {meanmax_exact}, sero min diff {sero_min:.2e}"),
    )
}

const A7_CONFIG: &str = r#"
[model]
layer_dims = [8, 8, 8]
clusters_k = 3

[train]
epochs = 3
batch_size = 16

[synth]
target_r2 = 0.5

[synth.generator]
n_subjects = 60
n_regions = 16
t_samples = 40

[synth.signal]
salient_rois = [2, 5, 9, 13]
"#;

fn a7() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_brainrgin");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("a7.toml");
    std::fs::write(&cfg, A7_CONFIG).unwrap();
    let data = dir.path().join("data");
    let run = |args: &[&PathBuf]| -> bool {
        let mut cmd = Command::new(bin);
        cmd.args(args.iter().map(|p| p.as_os_str()));
        cmd.output().map(|o| o.status.success()).unwrap_or(false)
    };
    let p = |s: &str| PathBuf::from(s);
    if !run(&[&p("synth"), &p("--config"), &cfg, &p("--out-dir"), &data, &p("--seed"), &p("2")]) {
        return outcome(false, "synth failed");
    }
    let mut files = vec![];
    for name in ["run1", "run2"] {
        let out = dir.path().join(name);
        let args = [
            &p("train"), &p("--config"), &cfg, &p("--data-dir"), &data, &p("--out-dir"), &out,
            &p("--threads"), &p("1"), &p("--seed"), &p("13"),
        ];
        if !run(&args) {
            return outcome(false, format!("{name}: train failed"));
        }
        let read = |f: &str| std::fs::read(out.join("seed-13").join(f)).unwrap_or_default();
        files.push((read("checkpoint.json"), read("history.csv")));
    }
    let same_ckpt = !files[0].0.is_empty() && files[0].0 == files[1].0;
    let same_hist = !files[0].1.is_empty() && files[0].1 == files[1].1;
    outcome(
        same_ckpt && same_hist,
        format!("checkpoint identical {same_ckpt} ({} bytes), history identical {same_hist}", files[0].0.len()),
    )
}

/// GIN with one shared weight: `h_i' = MLP((1+eps) B h_i + sum_j e_ij B h_j)`.
fn shared_gin(b: &Array2<f64>, eps: f64, h: &Array2<f64>, edges: &[Edge<f64>], mlp: [&Array2<f64>; 4]) -> Array2<f64> {
    let n = h.nrows();
    let msg: Vec<_> = (0..n).map(|i| b.dot(&h.row(i))).collect();
    let mut pre = Array2::zeros((n, b.nrows()));
    for i in 0..n {
        let mut acc = &msg[i] * (1.0 + eps);
        for e in edges.iter().filter(|e| e.src == i) {
            acc = acc + &msg[e.dst] * e.weight;
        }
        pre.row_mut(i).assign(&acc);
    }
    let [w1, b1, w2, b2] = mlp;
    (pre.dot(&w1.t()) + b1).mapv(|v| v.max(0.0)).dot(&w2.t()) + b2
}

fn a8() -> Outcome {
    let mut r = rng(88);
    let (mut worst_w, mut worst_out) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = 5;
        let keep = r.gen_range(0.3..1.0);
        let g = random_graph(&mut r, n, keep);
        let mut store = ParamStore::new();
        let layer = RginLayer::new(&mut store, "l", n, n, 3, 2, r.gen());
        randomize(&mut store, &mut r);
        store.get_mut(layer.theta1).data.fill(0.0);
        let get = |id| store.get(id).data.clone();
        let bias = get(layer.bias);
        let alpha = brainrgin::rgin::cluster_assignments(get(layer.theta1).view(), g.onehot().view());
        for i in 0..n {
            let w = brainrgin::rgin::node_weight(alpha.row(i), get(layer.theta2).view(), bias.view());
            worst_w = worst_w.max(max_abs_diff(&w, &bias));
        }
        let mut tape = Tape::new(&store);
        let h = tape.constant(g.node_features.clone());
        let out = layer.forward(&mut tape, h, &g.edges, &g.roi_ids, AggregationMode::Sum).unwrap();
        let got = tape.value(out).to_owned();
        let (w1, b1, w2, b2) = (get(layer.mlp_w1), get(layer.mlp_b1), get(layer.mlp_w2), get(layer.mlp_b2));
        let eps = get(layer.epsilon)[[0, 0]];
        let expect = shared_gin(&bias, eps, &g.node_features, &g.edges, [&w1, &b1, &w2, &b2]);
        worst_out = worst_out.max(max_abs_diff(&got, &expect));
    }
    outcome(
        worst_w == 0.0 && worst_out <= 1e-10,
        format!("node weights equal b (max diff {worst_w:.1e}), output vs shared-weight GIN {worst_out:.2e}"),
    )
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_uppercase()).collect());
    let wanted = |id: &str| only.as_ref().map_or(true, |o| o.iter().any(|x| x == id));
    // libtest passes flags such as `--list`; this harness has a single unnamed case.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results: Vec<(&str, Outcome)> = vec![];
    let mut report = |id: &'static str, o: Outcome| {
        let _ = writeln!(std::io::stdout(), "{id} {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        let _ = std::io::stdout().flush();
        results.push((id, o));
    };
    if wanted("A1") {
        report("A1", a1());
    }
    if wanted("A2") || wanted("A3") {
        let run = learn_run();
        if wanted("A2") {
            report("A2", a2(&run));
        }
        if wanted("A3") {
            report("A3", a3(&run));
        }
    }
    for (id, f) in [("A4", a4 as fn() -> Outcome), ("A5", a5), ("A6", a6), ("A7", a7), ("A8", a8)] {
        if wanted(id) {
            report(id, f());
        }
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(id, _)| *id).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
