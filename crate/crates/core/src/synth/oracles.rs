//! Brute-force reference implementations. None of these call into the
//! production solvers or estimators; they recompute everything from the
//! definitions so disagreements point at real bugs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Plain loop matrix-vector product.
pub fn naive_matvec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)] * v[c]).sum())
        .collect()
}

/// Two-pass mean and population std per column.
pub fn two_pass_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows.first().map_or(0, |r| r.len());
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let std = (0..d)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

/// Weighted binary cross-entropy from the definition, using `ln(σ(x))`
/// computed through `ln_1p(exp)`. Averaged over all n·k entries.
pub fn naive_bce(logits: &DMatrix<f64>, targets: &[Vec<bool>], pos_scale: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..logits.nrows() {
        for j in 0..logits.ncols() {
            let x = logits[(i, j)];
            // -ln σ(x) and -ln(1-σ(x)) = -ln σ(-x)
            let neg_log_sig = |t: f64| {
                if t > 0.0 {
                    (-t).exp().ln_1p()
                } else {
                    -t + t.exp().ln_1p()
                }
            };
            total += if targets[i][j] {
                pos_scale * neg_log_sig(x)
            } else {
                neg_log_sig(-x)
            };
        }
    }
    total / (logits.nrows() * logits.ncols()) as f64
}

/// Nonzero count per row of `weights`, averaged over rows.
pub fn brute_force_nec(weights: &DMatrix<f64>) -> f64 {
    let mut count = 0usize;
    for r in 0..weights.nrows() {
        for c in 0..weights.ncols() {
            if weights[(r, c)] != 0.0 {
                count += 1;
            }
        }
    }
    count as f64 / weights.nrows() as f64
}

/// Keeps the `keep` largest-magnitude entries. Ties go to the earlier
/// row-major position.
pub fn sort_prune(weights: &DMatrix<f64>, keep: usize) -> DMatrix<f64> {
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..weights.nrows() {
        for c in 0..weights.ncols() {
            entries.push((weights[(r, c)].abs(), r, c));
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = DMatrix::zeros(weights.nrows(), weights.ncols());
    for &(mag, r, c) in entries.iter().take(keep) {
        if mag > 0.0 {
            out[(r, c)] = weights[(r, c)];
        }
    }
    out
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Elastic-net multinomial objective written out in loops.
pub fn enet_objective(
    x: &DMatrix<f64>,
    labels: &[usize],
    w: &DMatrix<f64>,
    b: &[f64],
    lambda: f64,
    alpha_mix: f64,
) -> f64 {
    let n = x.nrows();
    let c = w.nrows();
    let mut ce = 0.0;
    for i in 0..n {
        let z: Vec<f64> = (0..c)
            .map(|r| b[r] + (0..x.ncols()).map(|j| w[(r, j)] * x[(i, j)]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ce += lse - z[labels[i]];
    }
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let l2: f64 = w.iter().map(|v| v * v).sum();
    ce / n as f64 + lambda * (alpha_mix * l1 + 0.5 * (1.0 - alpha_mix) * l2)
}

#[derive(Debug, Clone)]
pub struct CdSolution {
    pub weights: DMatrix<f64>,
    pub bias: Vec<f64>,
    pub objective: f64,
    pub sweeps: usize,
}

/// Cyclic coordinate descent on the elastic-net multinomial objective.
///
/// Each coordinate takes an exact minimizing step on a quadratic majorizer
/// with curvature `¼·mean(x_j²)` (the softmax diagonal Hessian is bounded by
/// ¼), followed by the closed-form soft-threshold. Stops when the largest
/// step in a sweep falls below `step_tol`.
pub fn coordinate_descent_oracle(
    x: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    lambda: f64,
    alpha_mix: f64,
    step_tol: f64,
    max_sweeps: usize,
) -> CdSolution {
    let (n, k) = (x.nrows(), x.ncols());
    let nf = n as f64;
    let mut w = DMatrix::<f64>::zeros(num_classes, k);
    let mut b = vec![0.0; num_classes];
    let mut z = vec![vec![0.0; num_classes]; n];
    let mut p: Vec<Vec<f64>> = z.iter().map(|r| softmax_row(r)).collect();
    let curv: Vec<f64> = (0..k)
        .map(|j| 0.25 * (0..n).map(|i| x[(i, j)].powi(2)).sum::<f64>() / nf)
        .collect();
    let l1 = lambda * alpha_mix;
    let l2 = lambda * (1.0 - alpha_mix);

    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut biggest: f64 = 0.0;
        for c in 0..num_classes {
            // bias: unpenalized, curvature ¼
            let g: f64 = (0..n)
                .map(|i| p[i][c] - (labels[i] == c) as u8 as f64)
                .sum::<f64>()
                / nf;
            let step = -g / 0.25;
            if step != 0.0 {
                b[c] += step;
                for i in 0..n {
                    z[i][c] += step;
                    p[i] = softmax_row(&z[i]);
                }
                biggest = biggest.max(step.abs());
            }
            for j in 0..k {
                if curv[j] == 0.0 {
                    continue;
                }
                let g: f64 = (0..n)
                    .map(|i| (p[i][c] - (labels[i] == c) as u8 as f64) * x[(i, j)])
                    .sum::<f64>()
                    / nf;
                let old = w[(c, j)];
                let u = curv[j] * old - g;
                let new = if u > l1 {
                    (u - l1) / (curv[j] + l2)
                } else if u < -l1 {
                    (u + l1) / (curv[j] + l2)
                } else {
                    0.0
                };
                let delta = new - old;
                if delta != 0.0 {
                    w[(c, j)] = new;
                    for i in 0..n {
                        z[i][c] += delta * x[(i, j)];
                        p[i] = softmax_row(&z[i]);
                    }
                    biggest = biggest.max(delta.abs());
                }
            }
        }
        if biggest < step_tol {
            break;
        }
    }
    let objective = enet_objective(x, labels, &w, &b, lambda, alpha_mix);
    CdSolution {
        weights: w,
        bias: b,
        objective,
        sweeps,
    }
}

/// Smallest λ on a fine geometric grid for which the coordinate-descent
/// solution is all zero. Brackets the true threshold within `ratio`.
pub fn grid_lambda_max(
    x: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    alpha_mix: f64,
    hi: f64,
    ratio: f64,
) -> f64 {
    let mut lambda = hi;
    loop {
        let next = lambda / ratio;
        let sol = coordinate_descent_oracle(x, labels, num_classes, next, alpha_mix, 1e-12, 20_000);
        if sol.weights.iter().any(|&v| v != 0.0) {
            return lambda;
        }
        lambda = next;
    }
}

/// Monte-Carlo estimate of `E (wᵀz + b − w̃ᵀW_c z − b̃)²` for
/// `z ~ N(μ, Σ)`, sampling through a Cholesky factor. Returns the mean
/// and its standard error.
#[allow(clippy::too_many_arguments)]
pub fn mc_error_oracle(
    wc: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    mu: &DVector<f64>,
    w: &DVector<f64>,
    b: f64,
    w_tilde: &DVector<f64>,
    b_tilde: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let d = mu.len();
    let l = sigma.clone().cholesky().expect("Σ must be SPD").l();
    let readout = wc.transpose() * w_tilde;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let g = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut *rng)));
        let z = &l * g + mu;
        let e = (w.dot(&z) + b - readout.dot(&z) - b_tilde).powi(2);
        sum += e;
        sum_sq += e * e;
    }
    let m = samples as f64;
    let mean = sum / m;
    let var = (sum_sq / m - mean * mean).max(0.0) * m / (m - 1.0);
    (mean, (var / m).sqrt())
}
