//! Training objectives: smooth-L1 regression, unit-norm and TopK pooling regularizers.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError, Var};

/// Pooling scores are clamped to `[SCORE_CLAMP, 1 - SCORE_CLAMP]` before taking logs.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("k = {k} outside [1, {max}] for {n} scores")]
    BadK { k: usize, n: usize, max: usize },
    #[error("score row {0} is not sorted in descending order")]
    Unsorted(usize),
    #[error("batch size mismatch: {0} predictions vs {1} targets")]
    BatchMismatch(usize, usize),
    #[error("lambda1 must be finite and non-negative, got {0}")]
    BadWeight(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How the unit loss treats `||w||_2 - 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitLossForm {
    /// `||w||_2 - 1`, unbounded below.
    #[default]
    Signed,
    /// `| ||w||_2 - 1 |`.
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    #[serde(default)]
    pub unit_form: UnitLossForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            unit_form: UnitLossForm::Signed,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda1.is_finite() && self.lambda1 >= 0.0 {
            Ok(())
        } else {
            Err(LossError::BadWeight(self.lambda1))
        }
    }
}

pub fn smooth_l1<T: Scalar>(pred: T, target: T) -> T {
    let d = (pred - target).abs();
    if d < T::one() {
        T::lit(0.5) * d * d
    } else {
        d - T::lit(0.5)
    }
}

/// Mean smooth-L1 over a batch.
pub fn smooth_l1_mean<T: Scalar>(preds: &[T], targets: &[T]) -> Result<T, LossError> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(LossError::BatchMismatch(preds.len(), targets.len()));
    }
    let total: T = preds.iter().zip(targets).map(|(&p, &t)| smooth_l1(p, t)).sum();
    Ok(total / T::from_count(preds.len()))
}

pub fn unit_loss<T: Scalar>(omega: &[T], form: UnitLossForm) -> T {
    let v = omega.iter().map(|&w| w * w).sum::<T>().sqrt() - T::one();
    match form {
        UnitLossForm::Signed => v,
        UnitLossForm::Abs => v.abs(),
    }
}

fn check_k(k: usize, n: usize) -> Result<(), LossError> {
    if k == 0 || k + 1 > n {
        return Err(LossError::BadK {
            k,
            n,
            max: n.saturating_sub(1),
        });
    }
    Ok(())
}

/// TopK pooling loss over `M` instances with `N` sigmoid scores each, rows sorted descending.
///
/// `-(1/M) sum_m [ (1/N) sum_{i<=k} ln s_mi + sum_{i<=N-k} ln(1 - s_m,i+k) ]`.
pub fn tpk_loss<T: Scalar>(sorted_scores: ArrayView2<'_, T>, k: usize) -> Result<T, LossError> {
    let (m, n) = sorted_scores.dim();
    check_k(k, n)?;
    let lo = T::lit(SCORE_CLAMP);
    let hi = T::one() - lo;
    let mut total = T::zero();
    for (r, row) in sorted_scores.rows().into_iter().enumerate() {
        if row.iter().zip(row.iter().skip(1)).any(|(a, b)| b > a) {
            return Err(LossError::Unsorted(r));
        }
        let clamp = |v: T| v.max(lo).min(hi);
        let selected: T = row.iter().take(k).map(|&s| clamp(s).ln()).sum();
        let rest: T = row.iter().skip(k).map(|&s| (T::one() - clamp(s)).ln()).sum();
        total += selected / T::from_count(n) + rest;
    }
    Ok(-total / T::from_count(m.max(1)))
}

/// Per-term values of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub smooth_l1: f64,
    pub unit: f64,
    pub tpk: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.smooth_l1.is_finite() && self.unit.is_finite() && self.tpk.is_finite() && self.total.is_finite()
    }
}

/// `smooth_l1 + sum_l unit(w_l) + lambda1 * sum_l tpk_l`.
///
/// `scores_per_layer` holds each layer's batch of sorted sigmoid scores with its `k`.
pub fn total_loss<T: Scalar>(
    preds: &[T],
    targets: &[T],
    omegas: &[Vec<T>],
    scores_per_layer: &[(Array2<T>, usize)],
    weights: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let sl1 = smooth_l1_mean(preds, targets)?;
    let unit: T = omegas.iter().map(|w| unit_loss(w, weights.unit_form)).sum();
    let mut tpk = T::zero();
    for (scores, k) in scores_per_layer {
        tpk += tpk_loss(scores.view(), *k)?;
    }
    let total = sl1 + unit + T::lit(weights.lambda1) * tpk;
    Ok(LossBreakdown {
        smooth_l1: sl1.to_f64_lossy(),
        unit: unit.to_f64_lossy(),
        tpk: tpk.to_f64_lossy(),
        total: total.to_f64_lossy(),
    })
}

/// Mean smooth-L1 of an `m x 1` prediction node against fixed targets.
pub fn smooth_l1_var<T: Scalar>(tape: &mut Tape<'_, T>, preds: Var, targets: &[T]) -> Result<Var, LossError> {
    let shape = tape.shape(preds);
    if shape.0 * shape.1 != targets.len() {
        return Err(LossError::BatchMismatch(shape.0 * shape.1, targets.len()));
    }
    let target = Array2::from_shape_vec(shape, targets.to_vec()).expect("length checked");
    let elementwise = tape.smooth_l1(preds, target)?;
    Ok(tape.mean(elementwise)?)
}

pub fn unit_loss_var<T: Scalar>(tape: &mut Tape<'_, T>, omega: Var, form: UnitLossForm) -> Var {
    let norm = tape.norm2(omega);
    let shifted = tape.add_const(norm, -T::one());
    match form {
        UnitLossForm::Signed => shifted,
        UnitLossForm::Abs => tape.abs(shifted),
    }
}

/// TopK loss of one instance from its unsorted `n x 1` sigmoid scores.
///
/// Sorting is a fixed permutation recorded from the current values, so the
/// gradient flows to the individual scores.
pub fn tpk_loss_var<T: Scalar>(tape: &mut Tape<'_, T>, gate: Var, k: usize) -> Result<Var, LossError> {
    let values: Vec<T> = tape.value(gate).iter().copied().collect();
    let n = values.len();
    check_k(k, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let lo = T::lit(SCORE_CLAMP);
    let hi = T::one() - lo;
    let top = tape.gather_rows(gate, &order[..k])?;
    let rest = tape.gather_rows(gate, &order[k..])?;
    let ln_top = tape.ln_clamped(top, lo, hi);
    let sum_top = tape.sum(ln_top);
    let sel = tape.scale(sum_top, T::one() / T::from_count(n));
    // ln(1 - clamp(s)) == ln(clamp(1 - s)) for a symmetric clamp.
    let neg = tape.scale(rest, -T::one());
    let one_minus = tape.add_const(neg, T::one());
    let ln_rest = tape.ln_clamped(one_minus, lo, hi);
    let sum_rest = tape.sum(ln_rest);
    let both = tape.add(sel, sum_rest)?;
    Ok(tape.scale(both, -T::one()))
}

/// Sorts each instance's scores descending into an `m x n` matrix for [`tpk_loss`].
pub fn sorted_score_rows<T: Scalar>(scores: &[Vec<T>]) -> Array2<T> {
    let n = scores.first().map_or(0, Vec::len);
    let mut out = Array2::zeros((scores.len(), n));
    for (r, row) in scores.iter().enumerate() {
        let mut sorted = row.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        for (c, v) in sorted.into_iter().enumerate() {
            out[[r, c]] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(0.5, 0.0), 0.125);
        assert_eq!(smooth_l1(0.0, 2.0), 1.5);
        assert_eq!(smooth_l1(1.0, 0.0), 0.5);
        assert!((smooth_l1(1.0f64 - 1e-12, 0.0) - 0.5).abs() < 1e-11);
    }

    #[test]
    fn unit_loss_values() {
        assert_eq!(unit_loss(&[1.0, 0.0], UnitLossForm::Signed), 0.0);
        assert_eq!(unit_loss(&[3.0, 4.0], UnitLossForm::Signed), 4.0);
        assert_eq!(unit_loss(&[0.5, 0.0], UnitLossForm::Signed), -0.5);
        assert_eq!(unit_loss(&[0.5, 0.0], UnitLossForm::Abs), 0.5);
    }

    #[test]
    fn tpk_loss_uniform_half() {
        let v = tpk_loss(array![[0.5, 0.5, 0.5, 0.5]].view(), 2).unwrap();
        let expect = 0.25 * 2.0 * 2f64.ln() + 2.0 * 2f64.ln();
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 1.7329).abs() < 1e-3);
    }

    #[test]
    fn tpk_loss_vanishes_at_perfect_separation() {
        let v = tpk_loss(array![[1.0, 1.0, 0.0, 0.0]].view(), 2).unwrap();
        assert!(v >= 0.0 && v < 1e-6);
    }

    #[test]
    fn tpk_loss_duplicated_row_unchanged() {
        let one = tpk_loss::<f64>(array![[0.9, 0.6, 0.3]].view(), 1).unwrap();
        let two = tpk_loss(array![[0.9, 0.6, 0.3], [0.9, 0.6, 0.3]].view(), 1).unwrap();
        assert!((one - two).abs() < 1e-15);
    }

    #[test]
    fn tpk_bad_k_and_unsorted() {
        let s = array![[0.9, 0.5]];
        assert!(matches!(tpk_loss(s.view(), 0), Err(LossError::BadK { .. })));
        assert!(matches!(tpk_loss(s.view(), 2), Err(LossError::BadK { .. })));
        assert_eq!(tpk_loss(array![[0.1, 0.5]].view(), 1), Err(LossError::Unsorted(0)));
    }

    #[test]
    fn total_without_regularizers_is_smooth_l1() {
        let b = total_loss(
            &[0.5, 2.0],
            &[0.0, 0.0],
            &[vec![1.0, 0.0]],
            &[(array![[0.7, 0.2]], 1)],
            &LossWeights { lambda1: 0.0, unit_form: UnitLossForm::Signed },
        )
        .unwrap();
        assert_eq!(b.total, (0.125 + 1.5) / 2.0);
        assert_eq!(b.total, b.smooth_l1);
    }

    #[test]
    fn total_vanishes_when_everything_is_perfect() {
        let b = total_loss(
            &[1.0, -1.0],
            &[1.0, -1.0],
            &[vec![0.0, 1.0], vec![0.6, 0.8]],
            &[(array![[1.0, 0.0, 0.0]], 1)],
            &LossWeights::default(),
        )
        .unwrap();
        assert!(b.total.abs() < 1e-6, "{b:?}");
    }

    #[test]
    fn tape_tpk_matches_closed_form() {
        let store = crate::tensor::ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let scores = array![[0.3], [0.8], [0.55], [0.1]];
        let gate = tape.constant(scores.clone());
        let v = tpk_loss_var(&mut tape, gate, 2).unwrap();
        let sorted = sorted_score_rows(&[scores.iter().copied().collect()]);
        let expect = tpk_loss(sorted.view(), 2).unwrap();
        assert!((tape.scalar(v) - expect).abs() < 1e-15);
    }

    #[test]
    fn negative_lambda_rejected() {
        let w = LossWeights { lambda1: -1.0, unit_form: UnitLossForm::Signed };
        assert!(w.validate().is_err());
    }
}
