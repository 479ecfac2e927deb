#![allow(dead_code)]

use brainrgin::fnc_graph::{build_graph, pearson_fnc, FncGraph, TimeSeries};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-scale..scale))
}

pub fn series(rng: &mut ChaCha8Rng, n: usize, t: usize) -> TimeSeries<f64> {
    TimeSeries::from_values(matrix(rng, (n, t), 1.0)).unwrap()
}

pub fn graph(rng: &mut ChaCha8Rng, n: usize, keep_pct: f64) -> FncGraph<f64> {
    let ts = series(rng, n, 3 * n + 3);
    build_graph(&pearson_fnc(&ts).unwrap(), keep_pct, rng.gen_range(-1.0..1.0)).unwrap()
}

/// Uniformly random permutation of `0..n`.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use brainrgin::covariates::CovariateColumn;
use brainrgin::experiment::{prepare, Prepared};
use brainrgin::model::ModelConfig;
use brainrgin::synth::{generate, GeneratorConfig, SignalSpec, SynthDataset};
use brainrgin::train::TrainConfig;
use brainrgin::Scalar;

pub fn covariate_columns(data: &SynthDataset) -> Vec<CovariateColumn> {
    let ages: Vec<f64> = data.subjects.iter().map(|s| s.age).collect();
    vec![
        CovariateColumn::numeric("age", &ages),
        CovariateColumn::new("site", data.subjects.iter().map(|s| s.site.clone()).collect()),
    ]
}

pub fn prepared<T: Scalar>(data: &SynthDataset, tc: &TrainConfig) -> Prepared<T> {
    let ids = data.subjects.iter().map(|s| s.id.clone()).collect();
    let fncs: Vec<_> = data.subjects.iter().map(|s| s.fnc.clone()).collect();
    let scores: Vec<f64> = data.subjects.iter().map(|s| s.score).collect();
    prepare(ids, &fncs, &scores, &covariate_columns(data), 1.0, tc).unwrap()
}

/// Small planted-signal dataset on `n_regions` regions with salient 1, 3, 5, 7.
pub fn small_synth(n_subjects: usize, n_regions: usize, seed: u64) -> SynthDataset {
    let cfg = GeneratorConfig {
        n_subjects,
        n_regions,
        t_samples: 2 * n_regions,
        seed,
        ..GeneratorConfig::default()
    };
    let spec = SignalSpec {
        salient_rois: vec![1, 3, 5, 7],
        noise_sd: 0.1,
        ..SignalSpec::default()
    };
    generate(&cfg, &spec).unwrap()
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        layer_dims: [8, 8, 8],
        clusters_k: 3,
        ..ModelConfig::default()
    }
}
