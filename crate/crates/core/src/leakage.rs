//! How well a linear readout over a random, untrained concept layer can
//! imitate any linear function of the embedding.
//!
//! For `f(z) = wᵀz + b` and a Gaussian `W_c` (k x d), the best
//! `f̃(z) = w̃ᵀ W_c z + b̃` leaves an expected square error of
//! `(w - W_cᵀw̃)ᵀ Σ (w - W_cᵀw̃)`, minimised over `w̃` by generalized least
//! squares. Averaged over `W_c` this is at most `λ_max(Σ)(1 - k/d)‖w‖²` for
//! `k < d` and zero for `k ≥ d`. Everything here is evaluated in closed form
//! through `Σ`; no embeddings are sampled.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::cbl::{fit_normalization, ConceptBottleneck};
use crate::sparse_final::{solve_path, PathConfig, RegularizationPath, SolverError};

/// Singular values of `Σ^{1/2} W_cᵀ` below this fraction of the largest are
/// treated as zero. Applied to the factor rather than to `W_c Σ W_cᵀ`, so
/// square but poorly conditioned draws still count as full rank.
pub const RANK_CUTOFF: f64 = 1e-12;

/// Slack on the averaged bound that absorbs Monte-Carlo error over `W_c`.
pub const BOUND_SLACK: f64 = 0.02;

/// Exact-recovery tolerance for `k ≥ d`, relative to `λ_max‖w‖²`.
pub const EXACT_RECOVERY_TOL: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum LeakageError {
    #[error("covariance is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Cbl(#[from] crate::cbl::CblError),
}

/// An SPD covariance with its principal square root and spectrum.
#[derive(Debug, Clone)]
pub struct Covariance {
    pub sigma: DMatrix<f64>,
    pub sqrt: DMatrix<f64>,
    /// Ascending eigenvalues.
    pub eigenvalues: Vec<f64>,
}

impl Covariance {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self, LeakageError> {
        let d = sigma.nrows();
        if sigma.ncols() != d || d == 0 {
            return Err(LeakageError::NotSpd(format!(
                "shape {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-10 * sigma.amax().max(1.0) {
            return Err(LeakageError::NotSpd(format!("asymmetry {asym:e}")));
        }
        let eig = SymmetricEigen::new(sigma.clone());
        let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(f64::total_cmp);
        if !(eigenvalues[0] > 0.0) {
            return Err(LeakageError::NotSpd(format!(
                "smallest eigenvalue {}",
                eigenvalues[0]
            )));
        }
        let root = eig.eigenvalues.map(f64::sqrt);
        let sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
        Ok(Covariance {
            sigma,
            sqrt,
            eigenvalues,
        })
    }

    /// `AᵀA + 0.1 I` for a standard Gaussian `d x d` matrix `A`.
    pub fn random_spd(d: usize, rng: &mut impl rand::Rng) -> Self {
        let a = gaussian_matrix(d, d, rng);
        let sigma = a.transpose() * &a + DMatrix::identity(d, d) * 0.1;
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        Covariance::new(sigma).expect("AᵀA + 0.1 I is SPD")
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().expect("nonempty spectrum")
    }

    /// Same eigenvectors, spectrum scaled by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Covariance {
            sigma: &self.sigma * c,
            sqrt: &self.sqrt * c.sqrt(),
            eigenvalues: self.eigenvalues.iter().map(|e| e * c).collect(),
        }
    }
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
    // row-major fill so that a k x d draw extends a (k-1) x d draw from the same stream
    DMatrix::from_row_iterator(
        rows,
        cols,
        (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)),
    )
}

pub fn gaussian_vector(len: usize, rng: &mut impl rand::Rng) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| StandardNormal.sample(&mut *rng)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Approximation {
    pub w_tilde: DVector<f64>,
    pub b_tilde: f64,
    /// `E_z |f(z) - f̃(z)|²` at the optimum.
    pub error: f64,
}

/// Closed-form best readout `(w̃, b̃)` over concept logits `W_c z`.
///
/// `w̃` is the pseudoinverse solution of `min ‖Σ^{1/2}W_cᵀw̃ - Σ^{1/2}w‖²`
/// (equivalently `(W_cΣW_cᵀ)⁺ W_cΣw`), computed from an SVD of
/// `Σ^{1/2}W_cᵀ`; `b̃ = (w - W_cᵀw̃)ᵀμ + b`.
pub fn optimal_approximator(
    wc: &DMatrix<f64>,
    cov: &Covariance,
    mu: &DVector<f64>,
    w: &DVector<f64>,
    b: f64,
) -> Result<Approximation, LeakageError> {
    let d = cov.dim();
    if wc.ncols() != d || w.len() != d || mu.len() != d {
        return Err(LeakageError::DimMismatch(format!(
            "W_c {}x{}, w {}, mu {}, Σ {d}x{d}",
            wc.nrows(),
            wc.ncols(),
            w.len(),
            mu.len()
        )));
    }
    let k = wc.nrows();
    let s = &cov.sqrt * w;
    if k == 0 {
        return Ok(Approximation {
            w_tilde: DVector::zeros(0),
            b_tilde: w.dot(mu) + b,
            error: s.norm_squared(),
        });
    }
    let basis = &cov.sqrt * wc.transpose();
    let svd = basis.svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| LeakageError::Numerical("SVD did not produce U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| LeakageError::Numerical("SVD did not produce Vᵀ".into()))?;
    let sv = &svd.singular_values;
    if sv.iter().any(|x| !x.is_finite()) {
        return Err(LeakageError::Numerical("non-finite singular values".into()));
    }
    let cutoff = RANK_CUTOFF * sv.max();
    let mut w_tilde = DVector::zeros(k);
    let mut residual = s.clone();
    for i in 0..sv.len() {
        if sv[i] <= cutoff {
            continue;
        }
        let ui = u.column(i);
        let coef = ui.dot(&s);
        residual.axpy(-coef, &ui, 1.0);
        w_tilde.axpy(coef / sv[i], &v_t.row(i).transpose(), 1.0);
    }
    let gap = w - wc.transpose() * &w_tilde;
    Ok(Approximation {
        b_tilde: gap.dot(mu) + b,
        error: residual.norm_squared(),
        w_tilde,
    })
}

/// `λ_max(1 - k/d)‖w‖²` for `k < d`, else 0.
pub fn theorem_bound(k: usize, d: usize, lambda_max: f64, w: &DVector<f64>) -> f64 {
    if k >= d {
        0.0
    } else {
        lambda_max * (1.0 - k as f64 / d as f64) * w.norm_squared()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassBound {
    /// Sum over class rows of the single-output bound.
    pub per_row_sum: f64,
    /// `C λ_max (1 - k/d) max_i ‖w_i‖²`.
    pub uniform: f64,
}

pub fn multiclass_bound(
    k: usize,
    d: usize,
    lambda_max: f64,
    rows: &[DVector<f64>],
) -> MulticlassBound {
    let per_row_sum = rows
        .iter()
        .map(|w| theorem_bound(k, d, lambda_max, w))
        .sum();
    let widest = rows
        .iter()
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()));
    let uniform = widest.map_or(0.0, |w| {
        rows.len() as f64 * theorem_bound(k, d, lambda_max, w)
    });
    MulticlassBound {
        per_row_sum,
        uniform,
    }
}

#[derive(Debug, Clone)]
pub struct LeakageSetup {
    pub cov: Covariance,
    pub mu: DVector<f64>,
    /// One target row per output; a single row is the scalar case.
    pub w_rows: Vec<DVector<f64>>,
    pub b: f64,
    pub k_grid: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl LeakageSetup {
    /// Random SPD `Σ`, Gaussian target rows, zero mean.
    pub fn random(d: usize, outputs: usize, k_grid: Vec<usize>, trials: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cov = Covariance::random_spd(d, &mut rng);
        let w_rows = (0..outputs).map(|_| gaussian_vector(d, &mut rng)).collect();
        LeakageSetup {
            cov,
            mu: DVector::zeros(d),
            w_rows,
            b: 0.0,
            k_grid,
            trials,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KResult {
    pub k: usize,
    /// Mean over trials of the error summed across output rows.
    pub mean_error: f64,
    pub std_dev: f64,
    /// `std_dev / sqrt(trials)`.
    pub std_error: f64,
    /// Sum over rows of the single-output bound.
    pub bound: f64,
    pub uniform_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageResult {
    pub per_k: Vec<KResult>,
    /// Largest single-trial error over all `k ≥ d`.
    pub exact_recovery_max_error: f64,
    pub lambda_max: f64,
    /// `λ_max Σ_i ‖w_i‖²`, the scale exact-recovery errors are judged against.
    pub scale: f64,
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageCheck {
    pub bound_holds: bool,
    pub exact_recovery: bool,
    pub strictly_decreasing: bool,
}

impl LeakageCheck {
    pub fn passed(&self) -> bool {
        self.bound_holds && self.exact_recovery && self.strictly_decreasing
    }
}

impl LeakageResult {
    /// Mean error within `(1 + slack)` of the bound for every `k < d`,
    /// exact recovery for `k ≥ d`, and strictly decreasing mean error over
    /// the `k < d` part of the grid.
    pub fn check(&self, d: usize) -> LeakageCheck {
        let below: Vec<&KResult> = self.per_k.iter().filter(|r| r.k < d).collect();
        LeakageCheck {
            bound_holds: below
                .iter()
                .all(|r| r.mean_error <= r.bound * (1.0 + BOUND_SLACK)),
            exact_recovery: self.exact_recovery_max_error <= EXACT_RECOVERY_TOL * self.scale,
            strictly_decreasing: below.windows(2).all(|p| p[1].mean_error < p[0].mean_error),
        }
    }
}

/// RNG for one `(k, trial)` pair, independent of scheduling order.
pub fn trial_rng(seed: u64, k: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 32) | trial as u64);
    rng
}

/// Draws `trials` Gaussian `W_c` per `k` and records the optimal error. The
/// same `W_c` serves every output row within a trial.
pub fn run_leakage_experiment(setup: &LeakageSetup) -> Result<LeakageResult, LeakageError> {
    if setup.trials == 0 {
        return Err(LeakageError::Invalid("trials must be >= 1".into()));
    }
    if setup.w_rows.is_empty() {
        return Err(LeakageError::Invalid("need at least one target row".into()));
    }
    let d = setup.dim();
    let lambda_max = setup.cov.lambda_max();
    let mut per_k = Vec::with_capacity(setup.k_grid.len());
    let mut exact_max: f64 = 0.0;
    for &k in &setup.k_grid {
        let errors: Vec<f64> = (0..setup.trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = trial_rng(setup.seed, k, t);
                let wc = gaussian_matrix(k, d, &mut rng);
                setup.w_rows.iter().try_fold(0.0, |acc, w| {
                    optimal_approximator(&wc, &setup.cov, &setup.mu, w, setup.b)
                        .map(|a| acc + a.error)
                })
            })
            .collect::<Result<_, _>>()?;
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = if errors.len() > 1 {
            errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        if k >= d {
            exact_max = errors.iter().copied().fold(exact_max, f64::max);
        }
        let mb = multiclass_bound(k, d, lambda_max, &setup.w_rows);
        per_k.push(KResult {
            k,
            mean_error: mean,
            std_dev: var.sqrt(),
            std_error: (var / n).sqrt(),
            bound: mb.per_row_sum,
            uniform_bound: mb.uniform,
        });
    }
    Ok(LeakageResult {
        per_k,
        exact_recovery_max_error: exact_max,
        lambda_max,
        scale: lambda_max * setup.w_rows.iter().map(|w| w.norm_squared()).sum::<f64>(),
        eigenvalues: setup.cov.eigenvalues.clone(),
    })
}

/// An untrained bias-free Gaussian bottleneck with its regularization path.
#[derive(Debug, Clone)]
pub struct RandomCblBaseline {
    pub bottleneck: ConceptBottleneck,
    pub path: RegularizationPath,
}

/// Builds a Gaussian `W_c` with `k` rows, fits normalization on the training
/// embeddings and solves the sparse final layer path on its logits.
#[allow(clippy::too_many_arguments)]
pub fn random_cbl_baseline(
    train_embeddings: &DMatrix<f64>,
    train_labels: &[usize],
    val_embeddings: &DMatrix<f64>,
    val_labels: &[usize],
    num_classes: usize,
    k: usize,
    seed: u64,
    path_cfg: &PathConfig,
) -> Result<RandomCblBaseline, LeakageError> {
    if k == 0 {
        return Err(LeakageError::Invalid(
            "random bottleneck needs k >= 1".into(),
        ));
    }
    let d = train_embeddings.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cb = ConceptBottleneck::new(gaussian_matrix(k, d, &mut rng), None);
    let cb = fit_normalization(&cb, train_embeddings)?;
    let x_train = cb.concept_logits(train_embeddings, true)?;
    let x_val = cb.concept_logits(val_embeddings, true)?;
    let path = solve_path(
        &x_train,
        train_labels,
        &x_val,
        val_labels,
        num_classes,
        path_cfg,
    )?;
    Ok(RandomCblBaseline {
        bottleneck: cb,
        path,
    })
}

/// `E_z |f(z) - f̃(z)|²` for an arbitrary readout `(w̃, b̃)`, in closed form:
/// the variance term `gᵀΣg` plus the squared mean offset `(gᵀμ + b - b̃)²`
/// with `g = w - W_cᵀw̃`.
pub fn expected_square_error(
    wc: &DMatrix<f64>,
    cov: &Covariance,
    mu: &DVector<f64>,
    w: &DVector<f64>,
    b: f64,
    w_tilde: &DVector<f64>,
    b_tilde: f64,
) -> f64 {
    let gap = w - wc.transpose() * w_tilde;
    let variance = (&cov.sqrt * &gap).norm_squared();
    let offset = gap.dot(mu) + b - b_tilde;
    variance + offset * offset
}
