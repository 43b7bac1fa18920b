//! Concept bottleneck layer: a linear map from backbone embeddings to concept
//! logits, trained with multi-label binary cross-entropy.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AuxiliaryDataset, ConceptLabel};
use crate::formats::EmbeddingMatrix;
use crate::metrics::roc_auc;

/// Lower bound applied to per-concept standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum CblError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("NaN in {0}")]
    NaN(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("normalization needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("crop embedding {0:?} not found")]
    MissingCrop(String),
}

/// `g(z) = W_c z (+ bias)` with per-concept normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBottleneck {
    /// `k x d`.
    pub weights: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
    pub norm_mean: DVector<f64>,
    pub norm_std: DVector<f64>,
}

impl ConceptBottleneck {
    /// Bottleneck with identity normalization.
    pub fn new(weights: DMatrix<f64>, bias: Option<DVector<f64>>) -> Self {
        let k = weights.nrows();
        ConceptBottleneck {
            weights,
            bias,
            norm_mean: DVector::zeros(k),
            norm_std: DVector::from_element(k, 1.0),
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Concept logits for a batch `z` (`n x d`), returned as `n x k`.
    pub fn concept_logits(
        &self,
        z: &DMatrix<f64>,
        normalized: bool,
    ) -> Result<DMatrix<f64>, CblError> {
        if z.ncols() != self.input_dim() {
            return Err(CblError::DimMismatch(format!(
                "embeddings have {} columns, bottleneck expects {}",
                z.ncols(),
                self.input_dim()
            )));
        }
        let mut out = z * self.weights.transpose();
        if let Some(b) = &self.bias {
            for mut row in out.row_iter_mut() {
                row += b.transpose();
            }
        }
        if normalized {
            self.normalize_in_place(&mut out);
        }
        Ok(out)
    }

    fn normalize_in_place(&self, logits: &mut DMatrix<f64>) {
        for j in 0..logits.ncols() {
            let (m, s) = (self.norm_mean[j], self.norm_std[j]);
            logits.column_mut(j).apply(|v| *v = (*v - m) / s);
        }
    }
}

/// Concept logits for a single embedding.
pub fn predict_concepts(
    cb: &ConceptBottleneck,
    z: &DVector<f64>,
    normalized: bool,
) -> Result<DVector<f64>, CblError> {
    if z.len() != cb.input_dim() {
        return Err(CblError::DimMismatch(format!(
            "embedding has {} entries, bottleneck expects {}",
            z.len(),
            cb.input_dim()
        )));
    }
    let mut raw = &cb.weights * z;
    if let Some(b) = &cb.bias {
        raw += b;
    }
    if normalized {
        for j in 0..raw.len() {
            raw[j] = (raw[j] - cb.norm_mean[j]) / cb.norm_std[j];
        }
    }
    Ok(raw)
}

/// Per-concept mean and (population) standard deviation of raw logits over
/// `embeddings`, computed in one streaming pass.
pub fn fit_normalization(
    cb: &ConceptBottleneck,
    embeddings: &DMatrix<f64>,
) -> Result<ConceptBottleneck, CblError> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(CblError::TooFewRows(n));
    }
    let logits = cb.concept_logits(embeddings, false)?;
    let k = cb.num_concepts();
    let mut mean = DVector::zeros(k);
    let mut m2 = DVector::zeros(k);
    for (i, row) in logits.row_iter().enumerate() {
        let count = (i + 1) as f64;
        for j in 0..k {
            let x = row[j];
            let delta = x - mean[j];
            mean[j] += delta / count;
            m2[j] += delta * (x - mean[j]);
        }
    }
    let std = m2.map(|v: f64| (v / n as f64).sqrt().max(STD_FLOOR));
    Ok(ConceptBottleneck {
        norm_mean: mean,
        norm_std: std,
        ..cb.clone()
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_shapes(logits: &DMatrix<f64>, targets: &[ConceptLabel]) -> Result<(), CblError> {
    if logits.nrows() != targets.len() {
        return Err(CblError::DimMismatch(format!(
            "{} logit rows vs {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| t.len() != logits.ncols()) {
        return Err(CblError::DimMismatch(format!(
            "target of length {} for {} concepts",
            t.len(),
            logits.ncols()
        )));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(CblError::NaN("logits"));
    }
    Ok(())
}

/// Mean over batch and concepts of
/// `-(s * o * log σ(l) + (1 - o) * log(1 - σ(l)))`, with `s` = `pos_scale`.
pub fn bce_multilabel_loss(
    logits: &DMatrix<f64>,
    targets: &[ConceptLabel],
    pos_scale: f64,
) -> Result<f64, CblError> {
    check_shapes(logits, targets)?;
    if !(pos_scale > 0.0) {
        return Err(CblError::Config(format!(
            "pos_scale must be > 0, got {pos_scale}"
        )));
    }
    let count = logits.len();
    if count == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        for j in 0..logits.ncols() {
            let l = logits[(i, j)];
            total += if t.get(j) {
                pos_scale * softplus(-l)
            } else {
                softplus(l)
            };
        }
    }
    Ok(total / count as f64)
}

/// Gradient of [`bce_multilabel_loss`] with respect to the logits.
pub fn bce_logit_gradient(
    logits: &DMatrix<f64>,
    targets: &[ConceptLabel],
    pos_scale: f64,
) -> Result<DMatrix<f64>, CblError> {
    check_shapes(logits, targets)?;
    let scale = 1.0 / logits.len().max(1) as f64;
    let mut g = DMatrix::zeros(logits.nrows(), logits.ncols());
    for (i, t) in targets.iter().enumerate() {
        for j in 0..logits.ncols() {
            let p = sigmoid(logits[(i, j)]);
            g[(i, j)] = scale * if t.get(j) { pos_scale * (p - 1.0) } else { p };
        }
    }
    Ok(g)
}

/// Loss and gradients with respect to `W_c` and the bias for one batch.
pub fn bce_weight_gradient(
    cb: &ConceptBottleneck,
    z: &DMatrix<f64>,
    targets: &[ConceptLabel],
    pos_scale: f64,
) -> Result<(f64, DMatrix<f64>, DVector<f64>), CblError> {
    let logits = cb.concept_logits(z, false)?;
    let loss = bce_multilabel_loss(&logits, targets, pos_scale)?;
    let g = bce_logit_gradient(&logits, targets, pos_scale)?;
    let gw = g.transpose() * z;
    let gb = g.row_sum().transpose();
    Ok((loss, gw, gb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CblTrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplier on positive terms; `None` picks the median negative/positive
    /// ratio over concepts, clamped to `[1, 100]`.
    pub pos_loss_scale: Option<f64>,
    pub augmentation_prob: f64,
    pub val_fraction: f64,
    pub use_bias: bool,
    pub seed: u64,
}

impl Default for CblTrainConfig {
    fn default() -> Self {
        CblTrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            epochs: 30,
            batch_size: 64,
            pos_loss_scale: None,
            augmentation_prob: 0.2,
            val_fraction: 0.1,
            use_bias: true,
            seed: 0,
        }
    }
}

impl CblTrainConfig {
    pub fn validate(&self) -> Result<(), CblError> {
        let bad = |m: String| Err(CblError::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if let Some(s) = self.pos_loss_scale {
            if !(s > 0.0) {
                return bad(format!("pos_loss_scale must be > 0, got {s}"));
            }
        }
        if !(0.0..=1.0).contains(&self.augmentation_prob) {
            return bad(format!(
                "augmentation_prob must lie in [0, 1], got {}",
                self.augmentation_prob
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            ));
        }
        Ok(())
    }
}

/// Median over concepts of `#neg / #pos`, clamped to `[1, 100]`.
pub fn default_pos_scale(labels: &[ConceptLabel]) -> f64 {
    let k = labels.first().map_or(0, ConceptLabel::len);
    if k == 0 {
        return 1.0;
    }
    let n = labels.len() as f64;
    let mut ratios: Vec<f64> = (0..k)
        .map(|j| {
            let pos = labels.iter().filter(|l| l.get(j)).count() as f64;
            if pos == 0.0 {
                f64::INFINITY
            } else {
                (n - pos) / pos
            }
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = if k % 2 == 1 {
        ratios[k / 2]
    } else {
        let (a, b) = (ratios[k / 2 - 1], ratios[k / 2]);
        if a.is_infinite() || b.is_infinite() {
            f64::INFINITY
        } else {
            0.5 * (a + b)
        }
    };
    median.clamp(1.0, 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Full-pass loss on the (unaugmented) training split after the epoch.
    pub train_loss: f64,
    /// Validation AUC per concept; `None` when the split holds one class only.
    pub val_auc: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainedCbl {
    /// Normalization already fitted on the training split.
    pub bottleneck: ConceptBottleneck,
    pub pos_scale: f64,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
    pub log: Vec<EpochLog>,
}

/// Uniform (unstratified) split of `0..n` into train and validation rows.
pub fn split_rows(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0001));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

struct Adam {
    m_w: DMatrix<f64>,
    v_w: DMatrix<f64>,
    m_b: DVector<f64>,
    v_b: DVector<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(k: usize, d: usize) -> Self {
        Adam {
            m_w: DMatrix::zeros(k, d),
            v_w: DMatrix::zeros(k, d),
            m_b: DVector::zeros(k),
            v_b: DVector::zeros(k),
            t: 0,
        }
    }

    fn step(
        &mut self,
        lr: f64,
        w: &mut DMatrix<f64>,
        gw: &DMatrix<f64>,
        b: Option<&mut DVector<f64>>,
        gb: &DVector<f64>,
    ) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        for i in 0..w.len() {
            update(&mut w[i], &mut self.m_w[i], &mut self.v_w[i], gw[i]);
        }
        if let Some(b) = b {
            for i in 0..b.len() {
                update(&mut b[i], &mut self.m_b[i], &mut self.v_b[i], gb[i]);
            }
        }
    }
}

/// Trains `W_c` (and bias) with Adam on binary cross-entropy. Weight decay is
/// added to the gradient as an L2 term. With probability
/// `augmentation_prob` a training row is swapped, for that step only, for the
/// crop embedding of its augmentation record and a one-hot target.
pub fn train_cbl(
    dataset: &AuxiliaryDataset,
    crop_embeddings: Option<&EmbeddingMatrix>,
    cfg: &CblTrainConfig,
) -> Result<TrainedCbl, CblError> {
    cfg.validate()?;
    let n = dataset.len();
    let k = dataset.num_concepts();
    let d = dataset.embeddings.dim();
    if n == 0 || k == 0 {
        return Err(CblError::DimMismatch(format!(
            "need at least one image and one concept, got n={n}, k={k}"
        )));
    }
    if dataset.concept_labels.len() != n {
        return Err(CblError::DimMismatch(
            "labels not aligned with images".into(),
        ));
    }

    // image row -> (crop row, concept) for rows that have an augmentation
    let mut crops: HashMap<usize, (usize, usize)> = HashMap::new();
    if let Some(crop_emb) = crop_embeddings {
        if crop_emb.dim() != d && !dataset.augmentations.is_empty() {
            return Err(CblError::DimMismatch(format!(
                "crop embeddings have dim {}, images have {d}",
                crop_emb.dim()
            )));
        }
        let crop_index: HashMap<&str, usize> = crop_emb
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let image_index: HashMap<&str, usize> = dataset
            .image_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        for a in &dataset.augmentations {
            let crop_row = *crop_index
                .get(a.crop_embedding_id.as_str())
                .ok_or_else(|| CblError::MissingCrop(a.crop_embedding_id.clone()))?;
            if let Some(&row) = image_index.get(a.image_id.as_str()) {
                crops.insert(row, (crop_row, a.concept_index));
            }
        }
    }

    let z_all = dataset.embeddings.to_matrix();
    let (train_rows, val_rows) = split_rows(n, cfg.val_fraction, cfg.seed);
    let train_labels: Vec<ConceptLabel> = train_rows
        .iter()
        .map(|&i| dataset.concept_labels[i].clone())
        .collect();
    let z_train = select(&z_all, &train_rows);
    let z_val = select(&z_all, &val_rows);
    let val_labels: Vec<ConceptLabel> = val_rows
        .iter()
        .map(|&i| dataset.concept_labels[i].clone())
        .collect();
    let pos_scale = cfg
        .pos_loss_scale
        .unwrap_or_else(|| default_pos_scale(&train_labels));

    let mut cb = ConceptBottleneck::new(
        DMatrix::zeros(k, d),
        cfg.use_bias.then(|| DVector::zeros(k)),
    );
    let mut adam = Adam::new(k, d);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut zb = DMatrix::zeros(chunk.len(), d);
            let mut tb = Vec::with_capacity(chunk.len());
            for (r, &pos) in chunk.iter().enumerate() {
                let row = train_rows[pos];
                let swap =
                    cfg.augmentation_prob > 0.0 && rng.random::<f64>() < cfg.augmentation_prob;
                match (swap, crops.get(&row), crop_embeddings) {
                    (true, Some(&(crop_row, concept)), Some(crop_emb)) => {
                        for (j, &v) in crop_emb.row_f32(crop_row).iter().enumerate() {
                            zb[(r, j)] = v as f64;
                        }
                        tb.push(ConceptLabel::one_hot(k, concept));
                    }
                    _ => {
                        zb.row_mut(r).copy_from(&z_train.row(pos));
                        tb.push(train_labels[pos].clone());
                    }
                }
            }
            let (loss, mut gw, mut gb) = bce_weight_gradient(&cb, &zb, &tb, pos_scale)?;
            if !loss.is_finite() {
                return Err(CblError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            if cfg.weight_decay > 0.0 {
                gw += &cb.weights * cfg.weight_decay;
                if let Some(b) = &cb.bias {
                    gb += b * cfg.weight_decay;
                }
            }
            adam.step(
                cfg.learning_rate,
                &mut cb.weights,
                &gw,
                cb.bias.as_mut(),
                &gb,
            );
        }

        let train_loss = bce_multilabel_loss(
            &cb.concept_logits(&z_train, false)?,
            &train_labels,
            pos_scale,
        )?;
        if !train_loss.is_finite() {
            return Err(CblError::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
            });
        }
        let val_auc = per_concept_auc(&cb.concept_logits(&z_val, false)?, &val_labels);
        log.push(EpochLog {
            epoch: epoch + 1,
            train_loss,
            val_auc,
        });
    }

    let bottleneck = if z_train.nrows() >= 2 {
        fit_normalization(&cb, &z_train)?
    } else {
        cb
    };
    Ok(TrainedCbl {
        bottleneck,
        pos_scale,
        train_rows,
        val_rows,
        log,
    })
}

/// ROC AUC of each logit column against the matching label bit.
pub fn per_concept_auc(logits: &DMatrix<f64>, labels: &[ConceptLabel]) -> Vec<Option<f64>> {
    (0..logits.ncols())
        .map(|j| {
            let scores: Vec<f64> = logits.column(j).iter().copied().collect();
            let truth: Vec<bool> = labels.iter().map(|l| l.get(j)).collect();
            roc_auc(&scores, &truth)
        })
        .collect()
}

pub(crate) fn select(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}
