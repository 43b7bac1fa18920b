//! Per-sample decision explanations from concept contributions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cbl::{CblError, ConceptBottleneck};
use crate::metrics::argmax;
use crate::sparse_final::SparseFinalLayer;

pub const NEGATIVE_PREFIX: &str = "NOT ";

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Cbl(#[from] CblError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub concept_index: usize,
    /// The concept name, prefixed with `NOT ` when its logit is negative.
    pub concept: String,
    pub concept_logit: f64,
    pub contribution: f64,
}

impl ExplanationEntry {
    pub fn is_negative(&self) -> bool {
        self.concept_logit < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample_id: String,
    pub predicted_class: usize,
    pub class_logit: f64,
    pub bias: f64,
    /// Sorted by descending contribution, ties by concept index.
    pub entries: Vec<ExplanationEntry>,
    /// Sum of the contributions not listed in `entries`.
    pub remainder: f64,
}

/// `g_i(z) · (W_F)_{class,i}` for every concept `i`. The concept values are
/// normalized logits unless `raw` is set.
pub fn contributions(
    cb: &ConceptBottleneck,
    layer: &SparseFinalLayer,
    z: &DVector<f64>,
    class: usize,
    raw: bool,
) -> Result<DVector<f64>, ExplainError> {
    let concepts = crate::cbl::predict_concepts(cb, z, !raw)?;
    contributions_from_concepts(layer, &concepts, class)
}

pub fn contributions_from_concepts(
    layer: &SparseFinalLayer,
    concepts: &DVector<f64>,
    class: usize,
) -> Result<DVector<f64>, ExplainError> {
    if class >= layer.num_classes() {
        return Err(ExplainError::ClassOutOfRange {
            class,
            classes: layer.num_classes(),
        });
    }
    if concepts.len() != layer.num_concepts() {
        return Err(ExplainError::DimMismatch(format!(
            "{} concept values for a layer over {} concepts",
            concepts.len(),
            layer.num_concepts()
        )));
    }
    Ok(concepts.component_mul(&layer.weights.row(class).transpose()))
}

/// Explains the predicted class through its `top_n` largest contributions.
/// Only concepts with a nonzero weight in the predicted row are ranked;
/// everything else folds into `remainder`.
pub fn top_contributions(
    cb: &ConceptBottleneck,
    layer: &SparseFinalLayer,
    z: &DVector<f64>,
    concept_names: &[String],
    sample_id: &str,
    top_n: usize,
) -> Result<Explanation, ExplainError> {
    let concepts = crate::cbl::predict_concepts(cb, z, true)?;
    explain_concepts(layer, &concepts, concept_names, sample_id, top_n)
}

pub fn explain_concepts(
    layer: &SparseFinalLayer,
    concepts: &DVector<f64>,
    concept_names: &[String],
    sample_id: &str,
    top_n: usize,
) -> Result<Explanation, ExplainError> {
    if concept_names.len() != layer.num_concepts() {
        return Err(ExplainError::DimMismatch(format!(
            "{} names for {} concepts",
            concept_names.len(),
            layer.num_concepts()
        )));
    }
    if layer.num_classes() == 0 {
        return Err(ExplainError::ClassOutOfRange {
            class: 0,
            classes: 0,
        });
    }
    let logits = &layer.weights * concepts + &layer.bias;
    let predicted = argmax(logits.iter().copied());
    let contrib = contributions_from_concepts(layer, concepts, predicted)?;
    let row = layer.weights.row(predicted);
    let mut ranked: Vec<usize> = (0..contrib.len()).filter(|&i| row[i] != 0.0).collect();
    ranked.sort_by(|&a, &b| contrib[b].total_cmp(&contrib[a]).then(a.cmp(&b)));
    let cut = top_n.min(ranked.len());
    let entries = ranked[..cut]
        .iter()
        .map(|&i| {
            let name = &concept_names[i];
            ExplanationEntry {
                concept_index: i,
                concept: if concepts[i] < 0.0 {
                    format!("{NEGATIVE_PREFIX}{name}")
                } else {
                    name.clone()
                },
                concept_logit: concepts[i],
                contribution: contrib[i],
            }
        })
        .collect();
    let remainder = ranked[cut..].iter().map(|&i| contrib[i]).sum();
    Ok(Explanation {
        sample_id: sample_id.to_string(),
        predicted_class: predicted,
        class_logit: logits[predicted],
        bias: layer.bias[predicted],
        entries,
        remainder,
    })
}

/// Explanations for every row of `concepts` (`n x k`, normalized).
pub fn explain_batch(
    layer: &SparseFinalLayer,
    concepts: &DMatrix<f64>,
    concept_names: &[String],
    sample_ids: &[String],
    top_n: usize,
) -> Result<Vec<Explanation>, ExplainError> {
    if sample_ids.len() != concepts.nrows() {
        return Err(ExplainError::DimMismatch("sample ids vs rows".into()));
    }
    concepts
        .row_iter()
        .zip(sample_ids)
        .map(|(row, id)| explain_concepts(layer, &row.transpose(), concept_names, id, top_n))
        .collect()
}

/// Fraction of listed entries whose concept logit is negative.
pub fn negative_reasoning_rate(explanations: &[Explanation]) -> f64 {
    let (neg, total) = explanations
        .iter()
        .flat_map(|e| &e.entries)
        .fold((0usize, 0usize), |(n, t), e| {
            (n + e.is_negative() as usize, t + 1)
        });
    if total == 0 {
        0.0
    } else {
        neg as f64 / total as f64
    }
}
