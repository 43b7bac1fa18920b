use std::cmp::Ordering;

use nalgebra::DMatrix;

use super::{RegularizationPath, SolverError, SparseFinalLayer};

/// Mean number of nonzero entries per row. Exact-zero test, no epsilon.
pub fn nec(weights: &DMatrix<f64>) -> f64 {
    if weights.nrows() == 0 {
        return 0.0;
    }
    weights.iter().filter(|&&w| w != 0.0).count() as f64 / weights.nrows() as f64
}

/// Orders by magnitude, then row, then column.
fn by_magnitude(w: &DMatrix<f64>, a: &(usize, usize), b: &(usize, usize)) -> Ordering {
    w[*a]
        .abs()
        .total_cmp(&w[*b].abs())
        .then(a.0.cmp(&b.0))
        .then(a.1.cmp(&b.1))
}

/// Zeroes the globally smallest-magnitude weights until exactly
/// `round(target · C)` nonzeros remain. Equal magnitudes are removed in
/// (row, column) order.
pub fn prune_to_nec(
    layer: &SparseFinalLayer,
    target_nec: f64,
) -> Result<SparseFinalLayer, SolverError> {
    if !(target_nec >= 0.0) {
        return Err(SolverError::Invalid(format!(
            "target NEC {target_nec} must be >= 0"
        )));
    }
    let classes = layer.num_classes();
    let keep = (target_nec * classes as f64).round() as usize;
    let mut nonzero: Vec<(usize, usize)> = (0..classes)
        .flat_map(|i| (0..layer.num_concepts()).map(move |j| (i, j)))
        .filter(|&ij| layer.weights[ij] != 0.0)
        .collect();
    if nonzero.len() < keep {
        return Err(SolverError::PruneUpward {
            current: layer.nec,
            target: target_nec,
        });
    }
    let w = &layer.weights;
    nonzero.sort_by(|a, b| by_magnitude(w, a, b));
    let mut pruned = w.clone();
    for &ij in &nonzero[..nonzero.len() - keep] {
        pruned[ij] = 0.0;
    }
    Ok(layer.with_weights(pruned))
}

/// Keeps the `top_n` largest-magnitude weights in every row; ties keep the
/// lower column index.
pub fn prune_rows_top_n(layer: &SparseFinalLayer, top_n: usize) -> SparseFinalLayer {
    let w = &layer.weights;
    let mut pruned = w.clone();
    for i in 0..w.nrows() {
        let mut cols: Vec<usize> = (0..w.ncols()).filter(|&j| w[(i, j)] != 0.0).collect();
        if cols.len() <= top_n {
            continue;
        }
        cols.sort_by(|&a, &b| w[(i, b)].abs().total_cmp(&w[(i, a)].abs()).then(a.cmp(&b)));
        for &j in &cols[top_n..] {
            pruned[(i, j)] = 0.0;
        }
    }
    layer.with_weights(pruned)
}

/// Picks the path entry whose NEC is closest to `target` from above (the
/// densest entry when none reaches it) and prunes it to the target. An entry
/// below the target is returned unpruned.
pub fn select_for_nec(
    path: &RegularizationPath,
    target_nec: f64,
) -> Result<SparseFinalLayer, SolverError> {
    let entries = &path.entries;
    if entries.is_empty() {
        return Err(SolverError::EmptyPath);
    }
    let above = entries
        .iter()
        .filter(|e| e.nec >= target_nec)
        .min_by(|a, b| (a.nec - target_nec).total_cmp(&(b.nec - target_nec)));
    let chosen = match above {
        Some(e) => e,
        None => entries
            .iter()
            .min_by(|a, b| {
                (a.nec - target_nec)
                    .abs()
                    .total_cmp(&(b.nec - target_nec).abs())
            })
            .expect("nonempty"),
    };
    if chosen.nec < target_nec {
        return Ok(chosen.layer.clone());
    }
    prune_to_nec(&chosen.layer, target_nec)
}
