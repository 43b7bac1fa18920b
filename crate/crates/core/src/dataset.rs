//! Builds the concept-labelled auxiliary dataset from grounded detections.
//!
//! The steps are: drop boxes at or below the confidence threshold, keep the
//! vocabulary concepts that still have a box somewhere, encode one bit per
//! surviving concept for every image, and sample crop-to-concept records.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::formats::{
    ConceptVocabulary, DatasetManifest, DetectionRecord, EmbeddingMatrix, FileRef, FormatError,
};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("concept {0:?} appears in a box but not in the vocabulary")]
    UnknownConcept(String),
    #[error("image id {0:?} has no embedding row")]
    UnresolvedImage(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Multi-hot concept target for one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConceptLabel(Vec<bool>);

impl ConceptLabel {
    pub fn zeros(k: usize) -> Self {
        ConceptLabel(vec![false; k])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        ConceptLabel(bits)
    }

    /// Single-concept target used for crop augmentation.
    pub fn one_hot(k: usize, j: usize) -> Self {
        let mut l = Self::zeros(k);
        l.0[j] = true;
        l
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse_bit_string(s: &str) -> Option<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(ConceptLabel)
    }
}

/// One crop-to-concept sample: the crop of box `box_index` (position in the
/// image's unfiltered box list) trained towards `concept_index` only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub image_id: String,
    pub box_index: usize,
    pub concept_index: usize,
    pub crop_embedding_id: String,
}

/// Key under which the crop embedding of a box is stored.
pub fn crop_id(image_id: &str, box_index: usize) -> String {
    format!("{image_id}#{box_index}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryDataset {
    /// Rows aligned with `image_ids`.
    pub embeddings: EmbeddingMatrix,
    pub image_ids: Vec<String>,
    pub concept_labels: Vec<ConceptLabel>,
    pub class_labels: Vec<usize>,
    pub concept_set: Vec<String>,
    pub augmentations: Vec<AugmentationRecord>,
    pub threshold: f64,
}

impl AuxiliaryDataset {
    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn num_concepts(&self) -> usize {
        self.concept_set.len()
    }

    pub fn to_manifest(
        &self,
        embeddings: FileRef,
        crop_embeddings: Option<FileRef>,
        seed: u64,
    ) -> DatasetManifest {
        DatasetManifest {
            embeddings,
            crop_embeddings,
            threshold: self.threshold,
            seed,
            concept_set: self.concept_set.clone(),
            image_ids: self.image_ids.clone(),
            class_labels: self.class_labels.clone(),
            concept_labels: self
                .concept_labels
                .iter()
                .map(|l| l.to_bit_string())
                .collect(),
            augmentations: self.augmentations.clone(),
        }
    }

    /// Rebuilds the dataset from a manifest and the embedding file it names.
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self, DatasetError> {
        m.embeddings.verify()?;
        let all = crate::formats::read_embeddings(&m.embeddings.path)?;
        Self::from_manifest_with(m, &all)
    }

    pub fn from_manifest_with(
        m: &DatasetManifest,
        all: &EmbeddingMatrix,
    ) -> Result<Self, DatasetError> {
        let index: HashMap<&str, usize> = all
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let rows = m
            .image_ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| DatasetError::UnresolvedImage(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let concept_labels = m
            .concept_labels
            .iter()
            .map(|s| {
                ConceptLabel::parse_bit_string(s)
                    .ok_or_else(|| DatasetError::DimMismatch(format!("bad label {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(AuxiliaryDataset {
            embeddings: all.subset(&rows),
            image_ids: m.image_ids.clone(),
            concept_labels,
            class_labels: m.class_labels.clone(),
            concept_set: m.concept_set.clone(),
            augmentations: m.augmentations.clone(),
            threshold: m.threshold,
        })
    }
}

/// Keeps boxes with confidence strictly above `threshold`.
pub fn filter_detections(records: &[DetectionRecord], threshold: f64) -> Vec<DetectionRecord> {
    records
        .iter()
        .map(|r| DetectionRecord {
            image_id: r.image_id.clone(),
            class_label: r.class_label,
            boxes: r
                .boxes
                .iter()
                .filter(|b| b.confidence > threshold)
                .cloned()
                .collect(),
        })
        .collect()
}

/// Vocabulary concepts that occur in at least one box, in vocabulary order.
pub fn build_concept_set(
    filtered: &[DetectionRecord],
    vocab: &ConceptVocabulary,
) -> Result<Vec<String>, DatasetError> {
    let index: HashMap<&str, usize> = vocab
        .concepts
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut present = vec![false; vocab.concepts.len()];
    for b in filtered.iter().flat_map(|r| &r.boxes) {
        match index.get(b.concept.as_str()) {
            Some(&j) => present[j] = true,
            None => return Err(DatasetError::UnknownConcept(b.concept.clone())),
        }
    }
    Ok(vocab
        .concepts
        .iter()
        .zip(present)
        .filter(|(_, p)| *p)
        .map(|(c, _)| c.clone())
        .collect())
}

/// Bit `j` is set iff concept `j` appears in any (already filtered) box.
pub fn encode_labels(record: &DetectionRecord, concept_set: &[String]) -> ConceptLabel {
    let mut bits = vec![false; concept_set.len()];
    for b in &record.boxes {
        if let Some(j) = concept_set.iter().position(|c| *c == b.concept) {
            bits[j] = true;
        }
    }
    ConceptLabel(bits)
}

/// Filter, derive the concept set and encode labels. Images that lose all
/// boxes stay in the dataset with an all-zero label.
pub fn assemble(
    embeddings: &EmbeddingMatrix,
    records: &[DetectionRecord],
    vocab: &ConceptVocabulary,
    threshold: f64,
) -> Result<AuxiliaryDataset, DatasetError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(DatasetError::BadThreshold(threshold));
    }
    let index: HashMap<&str, usize> = embeddings
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let rows = records
        .iter()
        .map(|r| {
            index
                .get(r.image_id.as_str())
                .copied()
                .ok_or_else(|| DatasetError::UnresolvedImage(r.image_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let filtered = filter_detections(records, threshold);
    let concept_set = build_concept_set(&filtered, vocab)?;
    let concept_labels = filtered
        .iter()
        .map(|r| encode_labels(r, &concept_set))
        .collect();
    Ok(AuxiliaryDataset {
        embeddings: embeddings.subset(&rows),
        image_ids: records.iter().map(|r| r.image_id.clone()).collect(),
        concept_labels,
        class_labels: records.iter().map(|r| r.class_label).collect(),
        concept_set,
        augmentations: Vec::new(),
        threshold,
    })
}

/// For every image with at least one box above `threshold` whose concept is
/// in `concept_set`, picks one such box uniformly at random.
pub fn emit_augmentations(
    records: &[DetectionRecord],
    concept_set: &[String],
    threshold: f64,
    seed: u64,
) -> Vec<AugmentationRecord> {
    let index: HashMap<&str, usize> = concept_set
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for r in records {
        let candidates: Vec<(usize, usize)> = r
            .boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| b.confidence > threshold)
            .filter_map(|(i, b)| index.get(b.concept.as_str()).map(|&j| (i, j)))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let (box_index, concept_index) = candidates[rng.random_range(0..candidates.len())];
        out.push(AugmentationRecord {
            image_id: r.image_id.clone(),
            box_index,
            concept_index,
            crop_embedding_id: crop_id(&r.image_id, box_index),
        });
    }
    out
}

/// Precision and recall for one concept; `None` where the ratio is 0/0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConceptPr {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionRecall {
    pub per_concept: Vec<ConceptPr>,
    /// Macro mean over concepts with at least one predicted positive.
    pub mean_precision: Option<f64>,
    /// Macro mean over concepts with at least one true positive label.
    pub mean_recall: Option<f64>,
}

pub fn annotation_precision_recall(
    predicted: &[ConceptLabel],
    truth: &[ConceptLabel],
) -> Result<PrecisionRecall, DatasetError> {
    if predicted.len() != truth.len() {
        return Err(DatasetError::DimMismatch(format!(
            "{} predicted labels vs {} true labels",
            predicted.len(),
            truth.len()
        )));
    }
    let k = truth.first().map_or(0, ConceptLabel::len);
    if let Some(bad) = predicted.iter().chain(truth).find(|l| l.len() != k) {
        return Err(DatasetError::DimMismatch(format!(
            "label of length {} where {k} expected",
            bad.len()
        )));
    }
    let mut per_concept = Vec::with_capacity(k);
    for j in 0..k {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (p, t) in predicted.iter().zip(truth) {
            match (p.get(j), t.get(j)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        per_concept.push(ConceptPr {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fneg),
        });
    }
    let mean =
        |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    Ok(PrecisionRecall {
        mean_precision: mean(per_concept.iter().filter_map(|c| c.precision).collect()),
        mean_recall: mean(per_concept.iter().filter_map(|c| c.recall).collect()),
        per_concept,
    })
}

/// Loads embeddings, detections and vocabulary from disk and assembles.
pub fn assemble_from_files(
    embeddings: &Path,
    detections: &Path,
    vocabulary: &Path,
    threshold: f64,
) -> Result<(EmbeddingMatrix, Vec<DetectionRecord>, AuxiliaryDataset), DatasetError> {
    let emb = crate::formats::read_embeddings(embeddings)?;
    let records = crate::formats::read_detections(detections)?;
    let vocab = crate::formats::read_vocabulary(vocabulary)?;
    let ds = assemble(&emb, &records, &vocab, threshold)?;
    Ok((emb, records, ds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::BoundingBox;
    use std::collections::BTreeSet;

    fn bx(concept: &str, confidence: f64) -> BoundingBox {
        BoundingBox {
            coords: [0.0, 0.0, 4.0, 4.0],
            confidence,
            concept: concept.into(),
        }
    }

    fn rec(id: &str, class: usize, boxes: Vec<BoundingBox>) -> DetectionRecord {
        DetectionRecord {
            image_id: id.into(),
            class_label: class,
            boxes,
        }
    }

    fn vocab(names: &[&str]) -> ConceptVocabulary {
        ConceptVocabulary::uniform(names.iter().map(|s| s.to_string()).collect(), 2)
    }

    #[test]
    fn threshold_is_strict() {
        let r = vec![rec(
            "a",
            0,
            vec![bx("x", 0.14), bx("y", 0.15), bx("z", 0.16)],
        )];
        let f = filter_detections(&r, 0.15);
        assert_eq!(f[0].boxes.len(), 1);
        assert_eq!(f[0].boxes[0].confidence, 0.16);

        let r = vec![rec("a", 0, vec![bx("x", 0.0), bx("y", 0.3), bx("z", 1.0)])];
        assert_eq!(filter_detections(&r, 0.0)[0].boxes.len(), 2);
        assert!(filter_detections(&r, 1.0)[0].boxes.is_empty());
    }

    #[test]
    fn concept_set_in_vocabulary_order() {
        let v = vocab(&["a", "b", "c"]);
        let r = vec![
            rec("i", 0, vec![bx("c", 0.9)]),
            rec("j", 1, vec![bx("a", 0.9)]),
        ];
        assert_eq!(build_concept_set(&r, &v).unwrap(), vec!["a", "c"]);
        assert!(build_concept_set(&[rec("i", 0, vec![])], &v)
            .unwrap()
            .is_empty());
        let err = build_concept_set(&[rec("i", 0, vec![bx("q", 0.9)])], &v).unwrap_err();
        assert!(matches!(err, DatasetError::UnknownConcept(c) if c == "q"));
    }

    #[test]
    fn labels_follow_boxes() {
        let set: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let l = encode_labels(
            &rec("i", 0, vec![bx("c", 0.9), bx("a", 0.9), bx("a", 0.8)]),
            &set,
        );
        assert_eq!(l.bits(), &[true, false, true]);
        assert_eq!(encode_labels(&rec("i", 0, vec![]), &set).count_ones(), 0);
    }

    #[test]
    fn assemble_three_images() {
        let emb = EmbeddingMatrix::new(
            vec!["i0".into(), "i1".into(), "i2".into()],
            2,
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
        )
        .unwrap();
        let records = vec![
            rec("i2", 1, vec![bx("b", 0.9)]),
            rec("i0", 0, vec![bx("a", 0.9), bx("b", 0.1)]),
            rec("i1", 0, vec![bx("c", 0.05)]),
        ];
        let v = vocab(&["a", "b", "c"]);
        let ds = assemble(&emb, &records, &v, 0.15).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.concept_set, vec!["a", "b"]);
        assert_eq!(ds.concept_labels[0].bits(), &[false, true]);
        assert_eq!(ds.concept_labels[1].bits(), &[true, false]);
        assert_eq!(ds.concept_labels[2].bits(), &[false, false]);
        assert_eq!(ds.embeddings.row_f32(0), &[4.0, 5.0]);
        assert_eq!(ds.class_labels, vec![1, 0, 0]);

        let bad = vec![rec("nope", 0, vec![])];
        assert!(matches!(
            assemble(&emb, &bad, &v, 0.15),
            Err(DatasetError::UnresolvedImage(_))
        ));
        assert!(matches!(
            assemble(&emb, &records, &v, 1.5),
            Err(DatasetError::BadThreshold(_))
        ));
    }

    #[test]
    fn augmentation_forced_and_empty() {
        let set = vec!["a".to_string(), "b".to_string()];
        let r = vec![
            rec("i0", 0, vec![bx("b", 0.1), bx("b", 0.9)]),
            rec("i1", 0, vec![]),
        ];
        let aug = emit_augmentations(&r, &set, 0.15, 3);
        assert_eq!(aug.len(), 1);
        assert_eq!(aug[0].box_index, 1);
        assert_eq!(aug[0].concept_index, 1);
        assert_eq!(aug[0].crop_embedding_id, "i0#1");
    }

    #[test]
    fn augmentation_is_uniform_over_boxes() {
        let set: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let records: Vec<_> = (0..40_000)
            .map(|i| {
                rec(
                    &format!("i{i}"),
                    0,
                    vec![bx("a", 0.9), bx("b", 0.9), bx("c", 0.9), bx("d", 0.9)],
                )
            })
            .collect();
        let aug = emit_augmentations(&records, &set, 0.15, 11);
        let mut counts = [0usize; 4];
        for a in &aug {
            counts[a.box_index] += 1;
        }
        for c in counts {
            let freq = c as f64 / 40_000.0;
            assert!((freq - 0.25).abs() <= 0.01, "{counts:?}");
        }
    }

    #[test]
    fn precision_recall_degenerate_cases() {
        let truth = vec![
            ConceptLabel::from_bits(vec![true, false]),
            ConceptLabel::from_bits(vec![false, true]),
        ];
        let pr = annotation_precision_recall(&truth, &truth).unwrap();
        assert_eq!(pr.mean_precision, Some(1.0));
        assert_eq!(pr.mean_recall, Some(1.0));

        let none = vec![ConceptLabel::zeros(2), ConceptLabel::zeros(2)];
        let pr = annotation_precision_recall(&none, &truth).unwrap();
        assert_eq!(pr.mean_recall, Some(0.0));
        assert_eq!(pr.mean_precision, None);
        assert!(pr.per_concept.iter().all(|c| c.precision.is_none()));

        assert!(annotation_precision_recall(&none[..1], &truth).is_err());
    }

    #[test]
    fn manifest_round_trip_rebuilds_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let emb_path = dir.path().join("e.bin");
        let emb = EmbeddingMatrix::new(vec!["i0".into(), "i1".into()], 1, vec![1.0, 2.0]).unwrap();
        crate::formats::write_embeddings(&emb, &emb_path).unwrap();
        let records = vec![rec("i1", 1, vec![bx("a", 0.9)]), rec("i0", 0, vec![])];
        let mut ds = assemble(&emb, &records, &vocab(&["a"]), 0.15).unwrap();
        ds.augmentations = emit_augmentations(&records, &ds.concept_set, 0.15, 0);
        let m = ds.to_manifest(FileRef::of(&emb_path).unwrap(), None, 0);
        let mpath = dir.path().join("m.json");
        crate::formats::write_manifest(&m, &mpath).unwrap();
        let back = crate::formats::read_manifest(&mpath).unwrap();
        assert_eq!(back, m);
        assert_eq!(AuxiliaryDataset::from_manifest(&back).unwrap(), ds);
    }

    #[test]
    fn randomized_labels_match_membership_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let names: Vec<String> = (0..12).map(|i| format!("c{i}")).collect();
        for _ in 0..50 {
            let boxes: Vec<_> = (0..rng.random_range(0..8))
                .map(|_| bx(&names[rng.random_range(0..12)], rng.random::<f64>()))
                .collect();
            let r = rec("x", 0, boxes);
            let f = &filter_detections(std::slice::from_ref(&r), 0.15)[0];
            let present: BTreeSet<&str> = f.boxes.iter().map(|b| b.concept.as_str()).collect();
            let l = encode_labels(f, &names);
            for (j, n) in names.iter().enumerate() {
                assert_eq!(l.get(j), present.contains(n.as_str()));
            }
        }
    }
}
