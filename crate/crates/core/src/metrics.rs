//! Evaluation: accuracy, ANEC, the top-5 pruning audit and nonzero-weight
//! distributions.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::cbl::{CblError, ConceptBottleneck};
use crate::sparse_final::{
    prune_rows_top_n, select_for_nec, RegularizationPath, SolverError, SparseFinalLayer,
};

/// NEC levels averaged by ANEC-avg.
pub const DEFAULT_NEC_LEVELS: [usize; 6] = [5, 10, 15, 20, 25, 30];

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Cbl(#[from] CblError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn predictions(logits: &DMatrix<f64>) -> Vec<usize> {
    logits
        .row_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect()
}

/// Fraction of rows whose argmax equals the label (0 for no rows).
pub fn accuracy_from_logits(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Accuracy of the full model on raw embeddings (`n x d`), using normalized
/// concept logits.
pub fn accuracy(
    layer: &SparseFinalLayer,
    cb: &ConceptBottleneck,
    embeddings: &DMatrix<f64>,
    labels: &[usize],
) -> Result<f64, MetricsError> {
    if embeddings.nrows() != labels.len() {
        return Err(MetricsError::DimMismatch(format!(
            "{} embeddings vs {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    if layer.num_concepts() != cb.num_concepts() {
        return Err(MetricsError::DimMismatch(format!(
            "final layer expects {} concepts, bottleneck has {}",
            layer.num_concepts(),
            cb.num_concepts()
        )));
    }
    let concepts = cb.concept_logits(embeddings, true)?;
    Ok(accuracy_from_logits(&layer.logits(&concepts), labels))
}

/// Rank-based ROC AUC with tied scores sharing their average rank. `None`
/// when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let pos_f = pos as f64;
    Some((rank_sum - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnecReport {
    pub levels: Vec<usize>,
    pub per_nec: BTreeMap<usize, f64>,
    /// Accuracy at NEC 5, when 5 is among the levels.
    pub anec5: Option<f64>,
    pub anec_avg: f64,
}

/// Test accuracy at each NEC level, selecting from a path that was solved
/// without the test split.
pub fn anec(
    path: &RegularizationPath,
    cb: &ConceptBottleneck,
    test_embeddings: &DMatrix<f64>,
    test_labels: &[usize],
    levels: &[usize],
) -> Result<AnecReport, MetricsError> {
    let concepts = cb.concept_logits(test_embeddings, true)?;
    if concepts.nrows() != test_labels.len() {
        return Err(MetricsError::DimMismatch("test labels".into()));
    }
    let mut per_nec = BTreeMap::new();
    for &level in levels {
        let layer = select_for_nec(path, level as f64)?;
        per_nec.insert(
            level,
            accuracy_from_logits(&layer.logits(&concepts), test_labels),
        );
    }
    let anec_avg = if levels.is_empty() {
        0.0
    } else {
        levels.iter().map(|l| per_nec[l]).sum::<f64>() / levels.len() as f64
    };
    Ok(AnecReport {
        levels: levels.to_vec(),
        anec5: per_nec.get(&5).copied(),
        per_nec,
        anec_avg,
    })
}

/// Fraction of samples whose predicted class changes when each class row is
/// cut down to its `top_n` largest-magnitude weights.
pub fn prediction_change_after_top_n(
    layer: &SparseFinalLayer,
    cb: &ConceptBottleneck,
    embeddings: &DMatrix<f64>,
    top_n: usize,
) -> Result<f64, MetricsError> {
    let concepts = cb.concept_logits(embeddings, true)?;
    Ok(prediction_change_on_concepts(layer, &concepts, top_n))
}

/// As [`prediction_change_after_top_n`], on precomputed normalized concept
/// logits.
pub fn prediction_change_on_concepts(
    layer: &SparseFinalLayer,
    concepts: &DMatrix<f64>,
    top_n: usize,
) -> f64 {
    if concepts.nrows() == 0 {
        return 0.0;
    }
    let pruned = prune_rows_top_n(layer, top_n);
    let before = predictions(&layer.logits(concepts));
    let after = predictions(&pruned.logits(concepts));
    let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    changed as f64 / concepts.nrows() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonzeroDistribution {
    /// Nonzero count of each class row.
    pub per_class: Vec<usize>,
    /// `(nonzero count, number of classes)` for every count that occurs.
    pub histogram: Vec<(usize, usize)>,
}

impl NonzeroDistribution {
    pub fn mean(&self) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        self.per_class.iter().sum::<usize>() as f64 / self.per_class.len() as f64
    }
}

pub fn nonzero_distribution(layer: &SparseFinalLayer) -> NonzeroDistribution {
    let per_class: Vec<usize> = layer
        .weights
        .row_iter()
        .map(|r| r.iter().filter(|&&w| w != 0.0).count())
        .collect();
    let mut bins = BTreeMap::new();
    for &c in &per_class {
        *bins.entry(c).or_insert(0) += 1;
    }
    NonzeroDistribution {
        per_class,
        histogram: bins.into_iter().collect(),
    }
}
