//! Planted ground-truth fixtures and the independent oracles used to check
//! the solvers and estimators against.

pub mod oracles;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{crop_id, ConceptLabel};
use crate::formats::{BoundingBox, ConceptVocabulary, DetectionRecord, EmbeddingMatrix};

/// Chance that a concept with positive weight in the image's prototype class
/// is switched on.
const PROTOTYPE_ON: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub d: usize,
    pub k: usize,
    pub classes: usize,
    /// Nonzeros per row of the true final layer.
    pub sparsity: usize,
    /// Probability of flipping each observed concept bit.
    pub noise_rate: f64,
    /// Std of the Gaussian noise added to class scores.
    pub class_noise: f64,
    /// Probability that an absent concept gets a low-confidence box.
    pub false_box_rate: f64,
    /// Distance between the two modes of each concept projection, in units
    /// of its within-mode std. Zero gives plain `z ~ N(0, Σ)`.
    pub separation: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            d: 64,
            k: 24,
            classes: 6,
            sparsity: 5,
            noise_rate: 0.05,
            class_noise: 0.1,
            false_box_rate: 0.1,
            separation: 4.0,
            seed: 7,
        }
    }
}

/// A concept model hidden behind Gaussian embeddings.
///
/// Each image draws a prototype class, which sets the odds of its latent
/// signs `s_j = ±1` (concepts the prototype weights positively are likely on,
/// negatively weighted ones likely off, the rest follow a base prevalence), and
/// `z = L (g + m/2 · Σ_j s_j q_j)` with `LLᵀ = Σ`, `g ~ N(0, I)` and
/// orthonormal `q_j`, so the projection `a_j · z` is `N(±m/2, 1)`.
/// Concept `j` is present when `a_j · z > t_j`; the class is the argmax of a
/// sparse linear score over the clean concept bits plus Gaussian noise.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub config: PlantedConfig,
    pub sigma: DMatrix<f64>,
    sigma_chol: DMatrix<f64>,
    /// `k x d`, Σ-orthonormal: `a_iᵀ Σ a_j = δ_ij`.
    pub concept_directions: DMatrix<f64>,
    /// Per-concept probability of a positive latent sign.
    pub prevalence: DVector<f64>,
    /// `d x k`, column `j` is `L q_j`; moves `a_j · z` by one unit only.
    shifts: DMatrix<f64>,
    pub concept_thresholds: DVector<f64>,
    /// `C x k` with exactly `sparsity` nonzeros per row.
    pub true_final: DMatrix<f64>,
    pub class_offsets: DVector<f64>,
    pub concept_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub embeddings: EmbeddingMatrix,
    pub crop_embeddings: EmbeddingMatrix,
    /// Threshold test without label noise.
    pub clean_concepts: Vec<ConceptLabel>,
    /// Bits after label noise; these drive the detections.
    pub concept_labels: Vec<ConceptLabel>,
    pub class_labels: Vec<usize>,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid planted config: {0}")]
    Config(String),
}

impl PlantedModel {
    pub fn new(config: PlantedConfig) -> Result<Self, SynthError> {
        let PlantedConfig {
            d,
            k,
            classes,
            sparsity,
            ..
        } = config;
        if d == 0 || k == 0 || classes < 2 {
            return Err(SynthError::Config(format!("d={d}, k={k}, C={classes}")));
        }
        if sparsity == 0 || sparsity > k {
            return Err(SynthError::Config(format!(
                "sparsity {sparsity} not in 1..={k}"
            )));
        }
        if !(0.0..0.5).contains(&config.noise_rate) {
            return Err(SynthError::Config(format!(
                "noise_rate {} not in [0, 0.5)",
                config.noise_rate
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let a = crate::leakage::gaussian_matrix(d, d, &mut rng);
        let sigma = a.transpose() * &a / d as f64 + DMatrix::identity(d, d) * 0.1;
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let sigma_chol = sigma.clone().cholesky().expect("AᵀA/d + 0.1 I is SPD").l();

        if k > d {
            return Err(SynthError::Config(format!("k={k} exceeds d={d}")));
        }
        let q = crate::leakage::gaussian_matrix(d, k, &mut rng).qr().q();
        let shifts = &sigma_chol * &q;
        let dirs = sigma_chol
            .transpose()
            .solve_upper_triangular(&q)
            .expect("Cholesky factor is invertible")
            .transpose();
        let prevalence = DVector::from_fn(k, |_, _| 0.15 + 0.15 * rng.random::<f64>());
        let thresholds = DVector::from_fn(k, |_, _| 0.5 * rng.random::<f64>() - 0.25);

        let mut true_final = DMatrix::zeros(classes, k);
        let mut order: Vec<usize> = (0..k).collect();
        let mut cursor = k;
        for c in 0..classes {
            let mut chosen = Vec::with_capacity(sparsity);
            while chosen.len() < sparsity {
                if cursor == k {
                    fisher_yates(&mut order, &mut rng);
                    cursor = 0;
                }
                let j = order[cursor];
                cursor += 1;
                if !chosen.contains(&j) {
                    chosen.push(j);
                }
            }
            for &j in &chosen {
                let magnitude = 1.0 + rng.random::<f64>();
                let sign = if rng.random::<f64>() < 0.75 {
                    1.0
                } else {
                    -1.0
                };
                true_final[(c, j)] = sign * magnitude;
            }
        }
        let concept_names = (0..k).map(|j| format!("concept_{j:02}")).collect();
        let mut model = PlantedModel {
            config,
            sigma,
            sigma_chol,
            concept_directions: dirs,
            prevalence,
            shifts,
            concept_thresholds: thresholds,
            true_final,
            class_offsets: DVector::zeros(classes),
            concept_names,
        };
        model.balance_classes(&mut rng);
        Ok(model)
    }

    /// Shifts per-class offsets towards equal class frequencies on a
    /// calibration sample.
    fn balance_classes(&mut self, rng: &mut ChaCha8Rng) {
        let c = self.config.classes;
        let bits: Vec<Vec<bool>> = (0..4000)
            .map(|_| self.clean_bits(&self.draw_z(rng)))
            .collect();
        let noise: Vec<DVector<f64>> = (0..bits.len()).map(|_| self.class_noise_vec(rng)).collect();
        for _ in 0..200 {
            let mut counts = vec![0usize; c];
            for (b, e) in bits.iter().zip(&noise) {
                counts[self.class_of(b, e)] += 1;
            }
            let target = bits.len() as f64 / c as f64;
            for (cls, &cnt) in counts.iter().enumerate() {
                self.class_offsets[cls] -= 0.05 * ((cnt as f64 + 1.0) / target).ln();
            }
        }
    }

    fn draw_z(&self, rng: &mut impl Rng) -> DVector<f64> {
        let g = DVector::from_iterator(
            self.config.d,
            (0..self.config.d).map(|_| StandardNormal.sample(&mut *rng)),
        );
        let half = 0.5 * self.config.separation;
        let proto = rng.random_range(0..self.config.classes);
        let signs = DVector::from_iterator(
            self.config.k,
            self.prevalence.iter().enumerate().map(|(j, &base)| {
                let w = self.true_final[(proto, j)];
                let p = if w > 0.0 {
                    PROTOTYPE_ON
                } else if w < 0.0 {
                    1.0 - PROTOTYPE_ON
                } else {
                    base
                };
                if rng.random::<f64>() < p {
                    half
                } else {
                    -half
                }
            }),
        );
        &self.sigma_chol * g + &self.shifts * signs
    }

    fn class_noise_vec(&self, rng: &mut impl Rng) -> DVector<f64> {
        let normal = Normal::new(0.0, self.config.class_noise.max(0.0)).expect("finite std");
        DVector::from_iterator(
            self.config.classes,
            (0..self.config.classes).map(|_| normal.sample(&mut *rng)),
        )
    }

    pub fn clean_bits(&self, z: &DVector<f64>) -> Vec<bool> {
        let proj = &self.concept_directions * z;
        proj.iter()
            .zip(self.concept_thresholds.iter())
            .map(|(p, t)| p > t)
            .collect()
    }

    fn class_of(&self, bits: &[bool], noise: &DVector<f64>) -> usize {
        let b = DVector::from_iterator(bits.len(), bits.iter().map(|&x| x as u8 as f64));
        let scores = &self.true_final * b + &self.class_offsets + noise;
        crate::metrics::argmax(scores.iter().copied())
    }

    pub fn vocabulary(&self) -> ConceptVocabulary {
        ConceptVocabulary::uniform(self.concept_names.clone(), self.config.classes)
    }

    /// Draws `n` images. Each observed-positive concept gets one box with
    /// confidence in `[0.5, 1)`; absent concepts get a false box with
    /// confidence in `[0, 0.3)` at `false_box_rate`. Every box has a crop
    /// embedding `0.5 z + (m + 1) L q_j`, which pushes concept `j` well past
    /// its threshold.
    pub fn generate(&self, n: usize, seed: u64) -> SynthData {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z_rows = DMatrix::zeros(n, cfg.d);
        let mut clean_concepts = Vec::with_capacity(n);
        let mut concept_labels = Vec::with_capacity(n);
        let mut class_labels = Vec::with_capacity(n);
        let mut detections = Vec::with_capacity(n);
        let mut crop_ids = Vec::new();
        let mut crop_values: Vec<f32> = Vec::new();
        let crop_push = cfg.separation + 1.0;

        for i in 0..n {
            let z = self.draw_z(&mut rng);
            let clean = self.clean_bits(&z);
            let noisy: Vec<bool> = clean
                .iter()
                .map(|&b| {
                    if rng.random::<f64>() < cfg.noise_rate {
                        !b
                    } else {
                        b
                    }
                })
                .collect();
            let class = self.class_of(&clean, &self.class_noise_vec(&mut rng));
            let image_id = format!("img_{i:06}");

            let mut boxes = Vec::new();
            for (j, &on) in noisy.iter().enumerate() {
                let confidence = if on {
                    0.5 + 0.5 * rng.random::<f64>()
                } else if rng.random::<f64>() < cfg.false_box_rate {
                    0.3 * rng.random::<f64>()
                } else {
                    continue;
                };
                let x0 = 200.0 * rng.random::<f64>();
                let y0 = 200.0 * rng.random::<f64>();
                boxes.push(BoundingBox {
                    coords: [
                        x0,
                        y0,
                        x0 + 8.0 + 56.0 * rng.random::<f64>(),
                        y0 + 8.0 + 56.0 * rng.random::<f64>(),
                    ],
                    confidence,
                    concept: self.concept_names[j].clone(),
                });
                let crop = &z * 0.5 + self.shifts.column(j) * crop_push;
                crop_ids.push(crop_id(&image_id, boxes.len() - 1));
                crop_values.extend(crop.iter().map(|&v| v as f32));
            }
            z_rows.row_mut(i).copy_from(&z.transpose());
            clean_concepts.push(ConceptLabel::from_bits(clean));
            concept_labels.push(ConceptLabel::from_bits(noisy));
            class_labels.push(class);
            detections.push(DetectionRecord {
                image_id,
                class_label: class,
                boxes,
            });
        }
        let ids = detections.iter().map(|r| r.image_id.clone()).collect();
        SynthData {
            embeddings: EmbeddingMatrix::from_matrix(ids, &z_rows).expect("finite draws"),
            crop_embeddings: EmbeddingMatrix::new(crop_ids, cfg.d, crop_values)
                .expect("unique crop ids"),
            clean_concepts,
            concept_labels,
            class_labels,
            detections,
        }
    }
}

fn fisher_yates(v: &mut [usize], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
