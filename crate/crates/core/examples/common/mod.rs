//! Planted fixture shared by the examples: a generator with known concepts
//! and class rules, a trained bottleneck and its train/validation split.
#![allow(dead_code)]

use cbmkit::cbl::{train_cbl, CblTrainConfig, TrainedCbl};
use cbmkit::dataset::{assemble, emit_augmentations, AuxiliaryDataset};
use cbmkit::synth::{PlantedConfig, PlantedModel, SynthData};
use nalgebra::DMatrix;

pub const THRESHOLD: f64 = 0.15;

pub struct Fixture {
    pub model: PlantedModel,
    pub train: SynthData,
    pub test: SynthData,
    pub dataset: AuxiliaryDataset,
}

pub fn fixture() -> Fixture {
    let model = PlantedModel::new(PlantedConfig::default()).expect("default config is valid");
    let train = model.generate(2000, 1);
    let test = model.generate(2000, 2);
    let mut dataset = assemble(
        &train.embeddings,
        &train.detections,
        &model.vocabulary(),
        THRESHOLD,
    )
    .expect("generated records are consistent");
    dataset.augmentations =
        emit_augmentations(&train.detections, &dataset.concept_set, THRESHOLD, 3);
    Fixture {
        model,
        train,
        test,
        dataset,
    }
}

pub fn cbl_config() -> CblTrainConfig {
    CblTrainConfig {
        learning_rate: 1e-3,
        seed: 1,
        ..Default::default()
    }
}

pub fn train(f: &Fixture) -> TrainedCbl {
    train_cbl(&f.dataset, Some(&f.train.crop_embeddings), &cbl_config()).expect("training succeeds")
}

pub fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// Normalized concept logits and labels for the training and validation rows.
pub struct Split {
    pub x_train: DMatrix<f64>,
    pub y_train: Vec<usize>,
    pub x_val: DMatrix<f64>,
    pub y_val: Vec<usize>,
}

pub fn split(f: &Fixture, t: &TrainedCbl) -> Split {
    let x = t
        .bottleneck
        .concept_logits(&f.dataset.embeddings.to_matrix(), true)
        .expect("dims match");
    let labels = |r: &[usize]| r.iter().map(|&i| f.dataset.class_labels[i]).collect();
    Split {
        x_train: rows(&x, &t.train_rows),
        y_train: labels(&t.train_rows),
        x_val: rows(&x, &t.val_rows),
        y_val: labels(&t.val_rows),
    }
}
