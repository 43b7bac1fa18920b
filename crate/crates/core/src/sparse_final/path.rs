use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::solver::{compute_lambda_max, solve_elastic_net, SolverOptions};
use super::{SolverError, SparseFinalLayer};
use crate::metrics::accuracy_from_logits;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub alpha_mix: f64,
    pub num_points: usize,
    /// `λ_min / λ_max`.
    pub min_ratio: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            alpha_mix: 0.99,
            num_points: 50,
            min_ratio: 1.0 / 500.0,
            tol: 1e-6,
            max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEntry {
    pub lambda: f64,
    pub layer: SparseFinalLayer,
    pub nec: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationPath {
    pub entries: Vec<PathEntry>,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub num_points: usize,
    /// Ratio between consecutive λ values.
    pub decay: f64,
}

/// `λ_t = λ_max · min_ratio^(t / (num_points - 1))`, log-evenly spaced.
pub fn lambda_grid(lambda_max: f64, num_points: usize, min_ratio: f64) -> Vec<f64> {
    match num_points {
        0 => vec![],
        1 => vec![lambda_max],
        m => (0..m)
            .map(|t| lambda_max * min_ratio.powf(t as f64 / (m - 1) as f64))
            .collect(),
    }
}

/// Solves the elastic-net problem along a decreasing λ grid, each point
/// warm-started from the previous solution. Validation data only feeds the
/// recorded accuracies.
pub fn solve_path(
    x_train: &DMatrix<f64>,
    y_train: &[usize],
    x_val: &DMatrix<f64>,
    y_val: &[usize],
    num_classes: usize,
    cfg: &PathConfig,
) -> Result<RegularizationPath, SolverError> {
    if cfg.num_points == 0 {
        return Err(SolverError::Invalid("num_points must be positive".into()));
    }
    if !(cfg.min_ratio > 0.0 && cfg.min_ratio < 1.0) {
        return Err(SolverError::Invalid(format!(
            "min_ratio must lie in (0, 1), got {}",
            cfg.min_ratio
        )));
    }
    if x_val.ncols() != x_train.ncols() || x_val.nrows() != y_val.len() {
        return Err(SolverError::DimMismatch("validation split shape".into()));
    }
    let lambda_max = compute_lambda_max(x_train, y_train, num_classes, cfg.alpha_mix)?;
    let grid = lambda_grid(lambda_max, cfg.num_points, cfg.min_ratio);
    let opts = SolverOptions {
        tol: cfg.tol,
        max_iter: cfg.max_iter,
    };
    let mut entries: Vec<PathEntry> = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let warm = entries.last().map(|e| &e.layer);
        let layer = solve_elastic_net(
            x_train,
            y_train,
            num_classes,
            lambda,
            cfg.alpha_mix,
            warm,
            opts,
        )?;
        let train_accuracy = accuracy_from_logits(&layer.logits(x_train), y_train);
        let val_accuracy = accuracy_from_logits(&layer.logits(x_val), y_val);
        entries.push(PathEntry {
            lambda,
            nec: layer.nec,
            layer,
            train_accuracy,
            val_accuracy,
        });
    }
    let decay = if cfg.num_points > 1 {
        cfg.min_ratio.powf(1.0 / (cfg.num_points - 1) as f64)
    } else {
        1.0
    };
    Ok(RegularizationPath {
        lambda_min: *grid.last().expect("nonempty grid"),
        entries,
        lambda_max,
        num_points: cfg.num_points,
        decay,
    })
}
