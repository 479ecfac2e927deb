//! ROI saliency from how often each region survives the first pooling layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fnc_graph::FncGraph;
use crate::model::{Model, ModelError};
use crate::pool::PoolSelection;
use crate::scalar::Scalar;
use crate::tensor::Tape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpretError {
    #[error("threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("no subjects to interpret")]
    Empty,
    #[error("kept index {index} out of range for {n} nodes")]
    BadIndex { index: usize, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiFrequency {
    pub roi_id: usize,
    pub label: String,
    pub freq: f64,
}

/// Pooling records and attention of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSelections {
    pub subject_id: String,
    /// ROI ids of the input nodes, so first-layer indices can be mapped to regions.
    pub roi_ids: Vec<usize>,
    pub layers: Vec<PoolSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_space: Option<Vec<Vec<f64>>>,
}

pub fn roi_label(labels: Option<&[String]>, roi: usize) -> String {
    labels
        .and_then(|l| l.get(roi))
        .cloned()
        .unwrap_or_else(|| format!("roi_{roi}"))
}

/// Runs the model on each graph and records every pooling layer's selection.
pub fn collect_selections<T: Scalar>(
    model: &Model<T>,
    ids: &[String],
    graphs: &[&FncGraph<T>],
    with_attention: bool,
) -> Result<Vec<SubjectSelections>, InterpretError> {
    ids.par_iter()
        .zip(graphs.par_iter())
        .map(|(id, g)| {
            let mut tape = Tape::new(&model.store);
            let out = model.forward(&mut tape, g)?;
            let z_space = with_attention.then(|| {
                out.z_space
                    .iter()
                    .flatten()
                    .map(|&z| tape.value(z).iter().map(|v| v.to_f64_lossy()).collect())
                    .collect()
            });
            Ok(SubjectSelections {
                subject_id: id.clone(),
                roi_ids: g.roi_ids.clone(),
                layers: out.selections,
                z_space,
            })
        })
        .collect()
}

/// Fraction of subjects in which each ROI was kept by the first pooling layer.
pub fn frequencies_from_selections(
    selections: &[SubjectSelections],
    n_rois: usize,
    labels: Option<&[String]>,
) -> Result<Vec<RoiFrequency>, InterpretError> {
    if selections.is_empty() {
        return Err(InterpretError::Empty);
    }
    let mut counts = vec![0usize; n_rois];
    for s in selections {
        let Some(first) = s.layers.first() else { continue };
        for &i in &first.kept_indices {
            let roi = *s.roi_ids.get(i).ok_or(InterpretError::BadIndex {
                index: i,
                n: s.roi_ids.len(),
            })?;
            if roi >= n_rois {
                return Err(InterpretError::BadIndex { index: roi, n: n_rois });
            }
            counts[roi] += 1;
        }
    }
    let total = selections.len() as f64;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(roi, c)| RoiFrequency {
            roi_id: roi,
            label: roi_label(labels, roi),
            freq: c as f64 / total,
        })
        .collect())
}

pub fn roi_frequencies<T: Scalar>(
    model: &Model<T>,
    graphs: &[&FncGraph<T>],
    labels: Option<&[String]>,
) -> Result<Vec<RoiFrequency>, InterpretError> {
    if graphs.is_empty() {
        return Err(InterpretError::Empty);
    }
    let ids: Vec<String> = (0..graphs.len()).map(|i| i.to_string()).collect();
    let selections = collect_selections(model, &ids, graphs, false)?;
    frequencies_from_selections(&selections, model.n_nodes, labels)
}

/// ROIs with `freq >= threshold`, by descending frequency then ascending id.
pub fn top_rois(freqs: &[RoiFrequency], threshold: f64) -> Result<Vec<RoiFrequency>, InterpretError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(InterpretError::InvalidThreshold(threshold));
    }
    let mut out: Vec<RoiFrequency> = freqs.iter().filter(|f| f.freq >= threshold).cloned().collect();
    out.sort_by(|a, b| b.freq.total_cmp(&a.freq).then(a.roi_id.cmp(&b.roi_id)));
    Ok(out)
}
