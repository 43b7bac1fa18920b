use nalgebra::{DMatrix, DVector};

use super::{SolverError, SparseFinalLayer};

/// `x W^T + b` for `x` of shape `n x k`.
pub fn class_logits(x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x * w.transpose();
    for mut row in out.row_iter_mut() {
        row += b.transpose();
    }
    out
}

fn check_inputs(
    x: &DMatrix<f64>,
    labels: &[usize],
    w: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(), SolverError> {
    if x.nrows() != labels.len() {
        return Err(SolverError::DimMismatch(format!(
            "{} rows vs {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if w.ncols() != x.ncols() || w.nrows() != b.len() {
        return Err(SolverError::DimMismatch(format!(
            "weights {}x{}, bias {}, features {}",
            w.nrows(),
            w.ncols(),
            b.len(),
            x.ncols()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= b.len()) {
        return Err(SolverError::LabelOutOfRange {
            label,
            classes: b.len(),
        });
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(SolverError::NaN("concept logits"));
    }
    if w.iter().chain(b.iter()).any(|v| v.is_nan()) {
        return Err(SolverError::NaN("parameters"));
    }
    Ok(())
}

/// Mean multinomial cross-entropy of the labels under `softmax(x W^T + b)`.
pub fn cross_entropy(
    x: &DMatrix<f64>,
    labels: &[usize],
    w: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<f64, SolverError> {
    check_inputs(x, labels, w, b)?;
    Ok(mean_ce(&class_logits(x, w, b), labels))
}

fn mean_ce(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Gradient of the mean cross-entropy: `((P - Y)^T x / n, colsum(P - Y) / n)`.
pub fn ce_gradient(
    x: &DMatrix<f64>,
    labels: &[usize],
    w: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>), SolverError> {
    check_inputs(x, labels, w, b)?;
    let (_, gw, gb) = ce_value_and_gradient(x, labels, w, b);
    Ok((gw, gb))
}

fn ce_value_and_gradient(
    x: &DMatrix<f64>,
    labels: &[usize],
    w: &DMatrix<f64>,
    b: &DVector<f64>,
) -> (f64, DMatrix<f64>, DVector<f64>) {
    let n = labels.len().max(1) as f64;
    let mut p = class_logits(x, w, b);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let mut row = p.row_mut(i);
        let max = row.max();
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        total += sum.ln() - (row[y].ln());
        row /= sum;
        row[y] -= 1.0;
    }
    p /= n;
    let gw = p.tr_mul(x);
    let gb = p.row_sum().transpose();
    (total / n, gw, gb)
}

/// `(1 - α) ½‖W‖²_F + α‖W‖₁`.
pub fn penalty(w: &DMatrix<f64>, alpha_mix: f64) -> f64 {
    let l2: f64 = w.iter().map(|v| v * v).sum();
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    (1.0 - alpha_mix) * 0.5 * l2 + alpha_mix * l1
}

/// Mean cross-entropy plus `λ R_α(W)`; the bias is not penalized.
pub fn objective(
    layer: &SparseFinalLayer,
    x: &DMatrix<f64>,
    labels: &[usize],
    lambda: f64,
    alpha_mix: f64,
) -> Result<f64, SolverError> {
    let ce = cross_entropy(x, labels, &layer.weights, &layer.bias)?;
    Ok(ce + lambda * penalty(&layer.weights, alpha_mix))
}

/// Log class frequencies, the optimal bias when `W = 0`. Absent classes get
/// a probability floor of `1e-12` to stay finite.
pub fn prior_bias(labels: &[usize], num_classes: usize) -> DVector<f64> {
    let mut counts = vec![0usize; num_classes];
    // out-of-range labels are rejected by the callers' input checks
    for &y in labels {
        if let Some(c) = counts.get_mut(y) {
            *c += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    DVector::from_iterator(
        num_classes,
        counts.iter().map(|&c| (c as f64 / n).max(1e-12).ln()),
    )
}

fn check_alpha(alpha_mix: f64) -> Result<(), SolverError> {
    if alpha_mix > 0.0 && alpha_mix <= 1.0 {
        Ok(())
    } else {
        Err(SolverError::BadAlpha(alpha_mix))
    }
}

/// Smallest λ at which `W = 0` is optimal:
/// `max |∂CE/∂W| / α` evaluated at `W = 0` and the class-prior bias.
pub fn compute_lambda_max(
    x: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    alpha_mix: f64,
) -> Result<f64, SolverError> {
    check_alpha(alpha_mix)?;
    let w = DMatrix::zeros(num_classes, x.ncols());
    let b = prior_bias(labels, num_classes);
    let (gw, _) = ce_gradient(x, labels, &w, &b)?;
    Ok(gw.amax() / alpha_mix)
}

fn soft_threshold(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Largest violation of the elastic-net optimality conditions.
pub fn kkt_residual(
    x: &DMatrix<f64>,
    labels: &[usize],
    w: &DMatrix<f64>,
    b: &DVector<f64>,
    lambda: f64,
    alpha_mix: f64,
) -> Result<f64, SolverError> {
    let (gw, gb) = ce_gradient(x, labels, w, b)?;
    Ok(kkt_from_gradient(w, &gw, &gb, lambda, alpha_mix))
}

fn kkt_from_gradient(
    w: &DMatrix<f64>,
    gw: &DMatrix<f64>,
    gb: &DVector<f64>,
    lambda: f64,
    alpha_mix: f64,
) -> f64 {
    let l1 = lambda * alpha_mix;
    let l2 = lambda * (1.0 - alpha_mix);
    let mut worst = gb.amax();
    for (wi, gi) in w.iter().zip(gw.iter()) {
        let g = gi + l2 * wi;
        let r = if *wi != 0.0 {
            (g + l1 * wi.signum()).abs()
        } else {
            (g.abs() - l1).max(0.0)
        };
        worst = worst.max(r);
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Target KKT residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-6,
            max_iter: 20_000,
        }
    }
}

/// Accelerated proximal gradient (FISTA with backtracking and function-value
/// restart) for the elastic-net multinomial objective. The ridge term is part
/// of the smooth gradient; the ℓ1 term is handled by soft-thresholding,
/// which writes exact zeros.
pub fn solve_elastic_net(
    x: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    lambda: f64,
    alpha_mix: f64,
    warm_start: Option<&SparseFinalLayer>,
    opts: SolverOptions,
) -> Result<SparseFinalLayer, SolverError> {
    check_alpha(alpha_mix)?;
    if !(lambda >= 0.0) {
        return Err(SolverError::Invalid(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(SolverError::Invalid(format!(
            "tol must be > 0, got {}",
            opts.tol
        )));
    }
    let k = x.ncols();
    let prior = prior_bias(labels, num_classes);
    check_inputs(x, labels, &DMatrix::zeros(num_classes, k), &prior)?;

    let lambda_max = compute_lambda_max(x, labels, num_classes, alpha_mix)?;
    if lambda >= lambda_max {
        return Ok(SparseFinalLayer::new(
            DMatrix::zeros(num_classes, k),
            prior,
            lambda,
            alpha_mix,
        ));
    }

    let (mut w, mut b) = match warm_start {
        Some(l) => {
            if l.weights.shape() != (num_classes, k) {
                return Err(SolverError::DimMismatch("warm start shape".into()));
            }
            (l.weights.clone(), l.bias.clone())
        }
        None => (DMatrix::zeros(num_classes, k), prior),
    };

    let l1 = lambda * alpha_mix;
    let l2 = lambda * (1.0 - alpha_mix);
    let smooth = |w: &DMatrix<f64>, b: &DVector<f64>| {
        let (ce, mut gw, gb) = ce_value_and_gradient(x, labels, w, b);
        gw += w * l2;
        (ce + 0.5 * l2 * w.norm_squared(), gw, gb)
    };
    let composite = |f: f64, w: &DMatrix<f64>| f + l1 * w.iter().map(|v| v.abs()).sum::<f64>();

    let (ce0, gw0, gb0) = ce_value_and_gradient(x, labels, &w, &b);
    let mut residual = kkt_from_gradient(&w, &gw0, &gb0, lambda, alpha_mix);
    if residual <= opts.tol {
        return Ok(SparseFinalLayer::new(w, b, lambda, alpha_mix));
    }
    let mut f_x = composite(ce0 + 0.5 * l2 * w.norm_squared(), &w);

    // Lipschitz estimate: softmax Hessian is bounded by ½‖x‖²/n per block
    let n = labels.len().max(1) as f64;
    let mut step_l = (0.5 * x.norm_squared() / n / (k.max(1) as f64)).max(1e-8) + l2;
    let (mut yw, mut yb) = (w.clone(), b.clone());
    let mut t = 1.0_f64;

    for iter in 1..=opts.max_iter {
        let (fy, gwy, gby) = smooth(&yw, &yb);
        let (nw, nb, fn_smooth) = loop {
            let nw = (&yw - &gwy / step_l).map(|v| soft_threshold(v, l1 / step_l));
            let nb = &yb - &gby / step_l;
            let dw = &nw - &yw;
            let db = &nb - &yb;
            let (f_new, _, _) = ce_value_and_gradient(x, labels, &nw, &nb);
            let f_new = f_new + 0.5 * l2 * nw.norm_squared();
            let model = fy
                + gwy.dot(&dw)
                + gby.dot(&db)
                + 0.5 * step_l * (dw.norm_squared() + db.norm_squared());
            if f_new <= model + 1e-12 * fy.abs().max(1.0) || step_l > 1e12 {
                break (nw, nb, f_new);
            }
            step_l *= 2.0;
        };
        let f_new = composite(fn_smooth, &nw);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if f_new > f_x {
            // restart momentum from the new point
            t = 1.0;
            yw = nw.clone();
            yb = nb.clone();
        } else {
            let beta = (t - 1.0) / t_next;
            yw = &nw + (&nw - &w) * beta;
            yb = &nb + (&nb - &b) * beta;
            t = t_next;
        }
        w = nw;
        b = nb;
        f_x = f_new;
        step_l *= 0.95;

        if iter % 5 == 0 || iter == opts.max_iter {
            let (_, gw, gb) = ce_value_and_gradient(x, labels, &w, &b);
            residual = kkt_from_gradient(&w, &gw, &gb, lambda, alpha_mix);
            if residual <= opts.tol {
                return Ok(SparseFinalLayer::new(w, b, lambda, alpha_mix));
            }
        }
    }
    Err(SolverError::NoConvergence {
        iterations: opts.max_iter,
        residual,
        tol: opts.tol,
    })
}
