//! Training, synthetic data and interpretation on small end-to-end runs.

mod common;

use brainrgin::experiment::{run_seed, test_interpretation};
use brainrgin::interpret::{frequencies_from_selections, roi_frequencies, SubjectSelections};
use brainrgin::model::{assemble, ModelConfig};
use brainrgin::synth::{generate, GeneratorConfig, SignalSpec};
use brainrgin::train::{pearson, train, TargetScaler, TrainConfig};

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr0: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let data = common::small_synth(60, 12, 1);
    let tc = quick(3);
    let prep = common::prepared::<f64>(&data, &tc);
    let a = run_seed(&prep, &common::small_model(), &tc, 5).unwrap();
    let b = run_seed(&prep, &common::small_model(), &tc, 5).unwrap();
    assert_eq!(a.model.store.to_checkpoint(), b.model.store.to_checkpoint());
    assert_eq!(format!("{:?}", a.outcome.history), format!("{:?}", b.outcome.history));
}

#[test]
fn thread_count_does_not_change_results() {
    let data = common::small_synth(60, 12, 2);
    let tc = quick(2);
    let prep = common::prepared::<f32>(&data, &tc);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_seed(&prep, &common::small_model(), &tc, 9).unwrap())
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(one.model.store.to_checkpoint(), three.model.store.to_checkpoint());
    assert_eq!(format!("{:?}", one.test), format!("{:?}", three.test));
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let data = common::small_synth(30, 10, 3);
    let tc = quick(0);
    let prep = common::prepared::<f64>(&data, &tc);
    let mut model = assemble::<f64>(&common::small_model(), prep.n_nodes(), 4).unwrap();
    let before = model.store.to_checkpoint();
    let outcome = train(
        &mut model,
        &prep.subset(&prep.split.train),
        &prep.subset(&prep.split.val),
        &tc,
        &TargetScaler::identity(),
        4,
    )
    .unwrap();
    assert!(outcome.history.is_empty());
    assert_eq!(outcome.best_epoch, None);
    assert_eq!(model.store.to_checkpoint(), before);
}

#[test]
fn training_loss_moving_average_decreases_for_default_seeds() {
    let data = common::small_synth(240, 20, 4);
    let tc = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let prep = common::prepared::<f32>(&data, &tc);
    let cfg = ModelConfig::default();
    for &seed in &tc.seeds {
        let run = run_seed(&prep, &cfg, &tc, seed).unwrap();
        let totals: Vec<f64> = run.outcome.history.iter().map(|h| h.total).collect();
        let avg: Vec<f64> = totals.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        assert_eq!(avg.len(), 6);
        assert!(avg.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {totals:?}");
    }
}

/// Least squares by normal equations and Gaussian elimination with partial pivoting.
fn least_squares_r2(features: &[Vec<f64>], y: &[f64]) -> f64 {
    let p = features[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (row, &yi) in features.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
            a[i][p] += row[i] * yi;
        }
    }
    for c in 0..p {
        let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        for r in 0..p {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=p {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    let beta: Vec<f64> = (0..p).map(|i| a[i][p] / a[i][i]).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (row, &yi) in features.iter().zip(y) {
        let fit: f64 = row.iter().zip(&beta).map(|(x, b)| x * b).sum();
        ss_res += (yi - fit).powi(2);
        ss_tot += (yi - mean).powi(2);
    }
    1.0 - ss_res / ss_tot
}

#[test]
fn noiseless_scores_reconstructible_from_fnc_and_covariates() {
    let cfg = GeneratorConfig {
        n_subjects: 300,
        seed: 6,
        ..GeneratorConfig::default()
    };
    let spec = SignalSpec::default();
    let data = generate(&cfg, &spec).unwrap();
    let pairs = spec.pairs();
    let features: Vec<Vec<f64>> = data
        .subjects
        .iter()
        .map(|s| {
            let mut row = vec![1.0, s.age];
            row.extend((1..cfg.site_effects.len()).map(|k| f64::from(s.site == format!("site{k}"))));
            row.extend(pairs.iter().map(|&(i, j)| s.fnc.get(i, j)));
            row
        })
        .collect();
    let scores: Vec<f64> = data.subjects.iter().map(|s| s.score).collect();
    let r2 = least_squares_r2(&features, &scores);
    assert!(r2 >= 0.999, "R^2 = {r2}");
}

#[test]
fn empty_salient_set_gives_no_predictive_signal() {
    let cfg = GeneratorConfig {
        n_subjects: 1000,
        n_regions: 20,
        t_samples: 40,
        seed: 7,
        ..GeneratorConfig::default()
    };
    let spec = SignalSpec {
        salient_rois: vec![],
        noise_sd: 1.0,
        ..SignalSpec::default()
    };
    let data = generate(&cfg, &spec).unwrap();
    assert!(data.subjects.iter().all(|s| s.signal == 0.0));
    let tc = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let prep = common::prepared::<f32>(&data, &tc);
    let run = run_seed(&prep, &common::small_model(), &tc, 0).unwrap();
    assert!(run.test.pearson_corr.abs() <= 0.1, "corr {}", run.test.pearson_corr);
}

#[test]
fn frequencies_recount_from_serialized_selections() {
    let data = common::small_synth(40, 12, 8);
    let tc = TrainConfig {
        split_fractions: [0.5, 0.0, 0.5],
        ..quick(0)
    };
    let prep = common::prepared::<f64>(&data, &tc);
    let model = assemble::<f64>(&common::small_model(), prep.n_nodes(), 1).unwrap();
    let (freqs, selections) = test_interpretation(&prep, &model, None, true).unwrap();
    assert_eq!(selections.len(), 20);

    let jsonl: String = selections.iter().map(|s| serde_json::to_string(s).unwrap() + "\n").collect();
    let back: Vec<SubjectSelections> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, selections);
    let mut counts = vec![0usize; 12];
    for s in &back {
        for &i in &s.layers[0].kept_indices {
            counts[s.roi_ids[i]] += 1;
        }
        assert!(s.z_space.is_some());
    }
    for f in &freqs {
        assert_eq!(f.freq, counts[f.roi_id] as f64 / 20.0);
    }
    assert_eq!(frequencies_from_selections(&back, 12, None).unwrap(), freqs);
}

#[test]
fn full_ratio_keeps_every_roi() {
    let data = common::small_synth(10, 10, 9);
    let tc = quick(0);
    let prep = common::prepared::<f64>(&data, &tc);
    let cfg = ModelConfig {
        pool_ratios: [1.0, 1.0, 1.0],
        ..common::small_model()
    };
    let model = assemble::<f64>(&cfg, 10, 2).unwrap();
    let graphs: Vec<_> = prep.graphs.iter().collect();
    let freqs = roi_frequencies(&model, &graphs, None).unwrap();
    assert!(freqs.iter().all(|f| f.freq == 1.0));
}

#[test]
fn seed_predictions_correlate_with_planted_signal() {
    let data = common::small_synth(400, 12, 10);
    let tc = TrainConfig {
        epochs: 20,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let prep = common::prepared::<f32>(&data, &tc);
    let run = run_seed(&prep, &common::small_model(), &tc, 0).unwrap();
    let preds: Vec<f64> = run.test.predictions.iter().map(|p| p.prediction).collect();
    let targets: Vec<f64> = run.test.predictions.iter().map(|p| p.target).collect();
    let r = pearson(&preds, &targets).unwrap();
    assert!(r > 0.3, "test corr {r}");
    let baseline = {
        let ys: Vec<f64> = prep.split.train.iter().map(|&i| prep.targets[i]).collect();
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        prep.split.val.iter().map(|&i| (prep.targets[i] - m).powi(2)).sum::<f64>() / prep.split.val.len() as f64
    };
    assert!(run.outcome.best_val_mse < baseline, "val mse {} vs baseline {baseline}", run.outcome.best_val_mse);
}
