//! Synthetic subjects with a planted connectivity-to-score signal.
//!
//! Salient regions share a latent factor whose loading varies per subject, so
//! their mutual correlations, and with them the score, rise and fall together.
//! The remaining regions form a few background communities with their own
//! random loadings, which add connectivity structure unrelated to the score.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fnc_graph::{pearson_fnc, FncError, FncMatrix, TimeSeries};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("salient roi {roi} outside [0, {n})")]
    BadRoi { roi: usize, n: usize },
    #[error("{got} weights for {pairs} salient pairs")]
    WeightCount { got: usize, pairs: usize },
    #[error("noise_sd must be finite and non-negative, got {0}")]
    BadNoise(f64),
    #[error("need at least one subject")]
    NoSubjects,
    #[error("t_samples ({t}) must be at least n_regions ({n})")]
    TooFewSamples { t: usize, n: usize },
    #[error("planted signal is not detectable: mean |fnc| salient {salient:.4} <= background {background:.4}")]
    Undetectable { salient: f64, background: f64 },
    #[error(transparent)]
    Fnc(#[from] FncError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Linear,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSpec {
    pub salient_rois: Vec<usize>,
    /// One coefficient per salient pair `(i, j)`, `i < j`, in lexicographic
    /// order of the sorted salient set. Empty means `pair_weight` for every pair.
    pub weights: Vec<f64>,
    pub pair_weight: f64,
    pub noise_sd: f64,
    pub nonlinearity: Nonlinearity,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            salient_rois: vec![4, 12, 20, 28, 36, 44],
            weights: Vec::new(),
            pair_weight: 0.3,
            noise_sd: 0.0,
            nonlinearity: Nonlinearity::Linear,
        }
    }
}

impl SignalSpec {
    fn sorted_salient(&self) -> Vec<usize> {
        let mut s = self.salient_rois.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let s = self.sorted_salient();
        let mut out = Vec::new();
        for (a, &i) in s.iter().enumerate() {
            for &j in &s[a + 1..] {
                out.push((i, j));
            }
        }
        out
    }

    pub fn pair_weights(&self) -> Vec<f64> {
        let pairs = self.pairs().len();
        if self.weights.is_empty() {
            vec![self.pair_weight; pairs]
        } else {
            self.weights.clone()
        }
    }

    pub fn validate(&self, n_regions: usize) -> Result<(), SynthError> {
        if let Some(&roi) = self.salient_rois.iter().find(|&&r| r >= n_regions) {
            return Err(SynthError::BadRoi { roi, n: n_regions });
        }
        let pairs = self.pairs().len();
        if !self.weights.is_empty() && self.weights.len() != pairs {
            return Err(SynthError::WeightCount {
                got: self.weights.len(),
                pairs,
            });
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(SynthError::BadNoise(self.noise_sd));
        }
        Ok(())
    }

    /// Noise-free score contribution of one connectivity matrix.
    pub fn signal(&self, fnc: &FncMatrix<f64>) -> f64 {
        self.pairs()
            .iter()
            .zip(self.pair_weights())
            .map(|(&(i, j), w)| {
                let v = fnc.get(i, j);
                w * match self.nonlinearity {
                    Nonlinearity::Linear => v,
                    Nonlinearity::Tanh => v.tanh(),
                }
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_subjects: usize,
    pub n_regions: usize,
    pub t_samples: usize,
    /// Range of the per-subject loading of salient regions on their shared factor.
    pub loading_range: (f64, f64),
    /// Upper bound of the per-subject loading of each background community.
    pub background_loading: f64,
    pub background_communities: usize,
    pub age_grid: (f64, f64, usize),
    pub age_effect: f64,
    pub site_effects: Vec<f64>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_subjects: 2000,
            n_regions: 53,
            t_samples: 120,
            loading_range: (0.6, 0.9),
            background_loading: 0.3,
            background_communities: 3,
            age_grid: (9.0, 11.0, 9),
            age_effect: 0.5,
            site_effects: vec![0.0, 0.4, -0.3, 0.2],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSubject {
    pub id: String,
    /// `n_regions x t_samples`, rounded to 6 decimals as written to disk.
    pub series: Array2<f64>,
    pub fnc: FncMatrix<f64>,
    /// Noise-free connectivity part of the score.
    pub signal: f64,
    pub score: f64,
    pub age: f64,
    pub site: String,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub subjects: Vec<SynthSubject>,
    pub spec: SignalSpec,
    pub config: GeneratorConfig,
    pub salient_mean_abs: f64,
    pub background_mean_abs: f64,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn subject(cfg: &GeneratorConfig, spec: &SignalSpec, salient: &[bool], idx: usize) -> Result<SynthSubject, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(idx as u64 + 1);
    let (n, t) = (cfg.n_regions, cfg.t_samples);
    let (lo, hi) = cfg.loading_range;
    let a: f64 = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let communities = cfg.background_communities.max(1);
    let b: Vec<f64> = (0..communities)
        .map(|_| if cfg.background_loading > 0.0 { rng.gen_range(0.0..cfg.background_loading) } else { 0.0 })
        .collect();
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let shared: Vec<f64> = (0..t).map(|_| normal()).collect();
    let background: Vec<Vec<f64>> = (0..communities).map(|_| (0..t).map(|_| normal()).collect()).collect();
    let mut series = Array2::zeros((n, t));
    let mut bg_slot = 0;
    for r in 0..n {
        let (load, factor) = if salient[r] {
            (a, &shared)
        } else {
            let c = bg_slot % communities;
            bg_slot += 1;
            (b[c], &background[c])
        };
        let own = (1.0 - load * load).sqrt();
        for s in 0..t {
            series[[r, s]] = round6(load * factor[s] + own * normal());
        }
    }
    let fnc = pearson_fnc(&TimeSeries::from_values(series.clone())?)?;
    let signal = spec.signal(&fnc);
    let (age_lo, age_hi, steps) = cfg.age_grid;
    let age = if steps > 1 {
        age_lo + (age_hi - age_lo) * rng.gen_range(0..steps) as f64 / (steps - 1) as f64
    } else {
        age_lo
    };
    let site_idx = if cfg.site_effects.is_empty() { 0 } else { rng.gen_range(0..cfg.site_effects.len()) };
    let site_shift = cfg.site_effects.get(site_idx).copied().unwrap_or(0.0);
    let age_mid = 0.5 * (age_lo + age_hi);
    let noise: f64 = StandardNormal.sample(&mut rng);
    let score = signal + cfg.age_effect * (age - age_mid) + site_shift + spec.noise_sd * noise;
    Ok(SynthSubject {
        id: format!("sub-{idx:05}"),
        series,
        fnc,
        signal,
        score,
        age,
        site: format!("site{site_idx}"),
    })
}

/// Generates `cfg.n_subjects` subjects; deterministic in `cfg.seed`.
pub fn generate(cfg: &GeneratorConfig, spec: &SignalSpec) -> Result<SynthDataset, SynthError> {
    spec.validate(cfg.n_regions)?;
    if cfg.n_subjects == 0 {
        return Err(SynthError::NoSubjects);
    }
    if cfg.t_samples < cfg.n_regions {
        return Err(SynthError::TooFewSamples {
            t: cfg.t_samples,
            n: cfg.n_regions,
        });
    }
    let mut salient = vec![false; cfg.n_regions];
    for &r in &spec.salient_rois {
        salient[r] = true;
    }
    let subjects: Vec<SynthSubject> = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| subject(cfg, spec, &salient, i))
        .collect::<Result<_, _>>()?;

    let (mut sal, mut n_sal, mut bg, mut n_bg) = (0.0, 0usize, 0.0, 0usize);
    for s in &subjects {
        for i in 0..cfg.n_regions {
            for j in i + 1..cfg.n_regions {
                let v = s.fnc.get(i, j).abs();
                if salient[i] && salient[j] {
                    sal += v;
                    n_sal += 1;
                } else {
                    bg += v;
                    n_bg += 1;
                }
            }
        }
    }
    let salient_mean_abs = if n_sal > 0 { sal / n_sal as f64 } else { 0.0 };
    let background_mean_abs = if n_bg > 0 { bg / n_bg as f64 } else { 0.0 };
    if n_sal > 0 && salient_mean_abs <= background_mean_abs {
        return Err(SynthError::Undetectable {
            salient: salient_mean_abs,
            background: background_mean_abs,
        });
    }
    Ok(SynthDataset {
        subjects,
        spec: spec.clone(),
        config: cfg.clone(),
        salient_mean_abs,
        background_mean_abs,
    })
}

/// Noise standard deviation giving an oracle `R^2` of `target_r2` once
/// covariates are removed, estimated from a noise-free pilot sample.
pub fn calibrate_noise_sd(cfg: &GeneratorConfig, spec: &SignalSpec, target_r2: f64, pilot: usize) -> Result<f64, SynthError> {
    let pilot_cfg = GeneratorConfig {
        n_subjects: pilot.max(2),
        seed: cfg.seed ^ 0xCA11_B4A7E,
        ..cfg.clone()
    };
    let pilot_spec = SignalSpec {
        noise_sd: 0.0,
        ..spec.clone()
    };
    let data = generate(&pilot_cfg, &pilot_spec)?;
    let sig: Vec<f64> = data.subjects.iter().map(|s| s.signal).collect();
    let mean = sig.iter().sum::<f64>() / sig.len() as f64;
    let var = sig.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (sig.len() - 1) as f64;
    let r2 = target_r2.clamp(1e-6, 1.0);
    Ok((var * (1.0 - r2) / r2).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_subjects: 12,
            n_regions: 10,
            t_samples: 40,
            ..GeneratorConfig::default()
        }
    }

    fn small_spec() -> SignalSpec {
        SignalSpec {
            salient_rois: vec![1, 4, 7],
            ..SignalSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&small(), &small_spec()).unwrap();
        let b = generate(&small(), &small_spec()).unwrap();
        for (x, y) in a.subjects.iter().zip(&b.subjects) {
            assert_eq!(x.series, y.series);
            assert_eq!(x.score.to_bits(), y.score.to_bits());
            assert_eq!(x.site, y.site);
        }
        let c = generate(&GeneratorConfig { seed: 1, ..small() }, &small_spec()).unwrap();
        assert_ne!(a.subjects[0].series, c.subjects[0].series);
    }

    #[test]
    fn salient_pairs_are_stronger() {
        let d = generate(&small(), &small_spec()).unwrap();
        assert!(d.salient_mean_abs > d.background_mean_abs);
    }

    #[test]
    fn pairs_and_weights() {
        let spec = small_spec();
        assert_eq!(spec.pairs(), vec![(1, 4), (1, 7), (4, 7)]);
        assert_eq!(spec.pair_weights(), vec![0.3; 3]);
        let bad = SignalSpec {
            weights: vec![1.0],
            ..small_spec()
        };
        assert!(matches!(bad.validate(10), Err(SynthError::WeightCount { .. })));
        assert!(matches!(small_spec().validate(5), Err(SynthError::BadRoi { roi: 7, n: 5 })));
    }

    #[test]
    fn rejects_short_series() {
        let cfg = GeneratorConfig {
            t_samples: 5,
            ..small()
        };
        assert!(matches!(generate(&cfg, &small_spec()), Err(SynthError::TooFewSamples { .. })));
    }

    #[test]
    fn noise_free_score_is_signal_plus_covariates() {
        let cfg = small();
        let d = generate(&cfg, &small_spec()).unwrap();
        for s in &d.subjects {
            let site: usize = s.site[4..].parse().unwrap();
            let expect = s.signal + cfg.age_effect * (s.age - 10.0) + cfg.site_effects[site];
            assert!((s.score - expect).abs() < 1e-12);
        }
    }
}
