//! Sparse final layer: elastic-net multinomial logistic regression on
//! normalized concept logits, its regularization path, and NEC control by
//! path selection plus magnitude pruning.

mod path;
mod prune;
mod solver;

use nalgebra::{DMatrix, DVector};

pub use path::{lambda_grid, solve_path, PathConfig, PathEntry, RegularizationPath};
pub use prune::{nec, prune_rows_top_n, prune_to_nec, select_for_nec};
pub use solver::{
    ce_gradient, class_logits, compute_lambda_max, cross_entropy, kkt_residual, objective, penalty,
    prior_bias, solve_elastic_net, SolverOptions,
};

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("NaN in {0}")]
    NaN(&'static str),
    #[error("alpha_mix must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(
        "no convergence after {iterations} iterations (KKT residual {residual:e}, tol {tol:e})"
    )]
    NoConvergence {
        iterations: usize,
        residual: f64,
        tol: f64,
    },
    #[error("cannot prune upward: layer has NEC {current}, target {target}")]
    PruneUpward { current: f64, target: f64 },
    #[error("regularization path is empty")]
    EmptyPath,
}

/// `h(c) = W_F c + b_F`, with the regularization it was solved at.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFinalLayer {
    /// `C x k`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub lambda: f64,
    pub alpha_mix: f64,
    /// Mean number of nonzero weights per class row.
    pub nec: f64,
}

impl SparseFinalLayer {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>, lambda: f64, alpha_mix: f64) -> Self {
        let nec = nec(&weights);
        SparseFinalLayer {
            weights,
            bias,
            lambda,
            alpha_mix,
            nec,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_concepts(&self) -> usize {
        self.weights.ncols()
    }

    pub fn nonzeros(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    /// Class logits for concept logits `x` (`n x k`).
    pub fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        class_logits(x, &self.weights, &self.bias)
    }

    pub(crate) fn with_weights(&self, weights: DMatrix<f64>) -> Self {
        SparseFinalLayer::new(weights, self.bias.clone(), self.lambda, self.alpha_mix)
    }
}
