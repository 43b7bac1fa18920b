//! Dataset assembly on a CUB-sized synthetic corpus, checked against
//! brute-force references.

use std::collections::{BTreeMap, BTreeSet};

use cbmkit::dataset::{
    annotation_precision_recall, assemble, build_concept_set, encode_labels, filter_detections,
    ConceptLabel,
};
use cbmkit::formats::{BoundingBox, ConceptVocabulary, DetectionRecord, EmbeddingMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLASSES: usize = 200;
const CONCEPTS: usize = 312;

struct Corpus {
    vocab: ConceptVocabulary,
    records: Vec<DetectionRecord>,
    /// Concepts actually present in each image, as vocabulary indices.
    truth: Vec<BTreeSet<usize>>,
    embeddings: EmbeddingMatrix,
}

/// Each class prompts 12 concepts. An image shows ~70% of its class's
/// concepts; the detector finds present concepts with confidence skewed
/// high and hallucinates absent candidates with low confidence.
fn corpus(images: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let concepts: Vec<String> = (0..CONCEPTS).map(|j| format!("attribute {j}")).collect();
    let candidates: BTreeMap<usize, Vec<usize>> = (0..CLASSES)
        .map(|c| (c, (0..12).map(|_| rng.random_range(0..CONCEPTS)).collect()))
        .collect();
    let mut records = Vec::with_capacity(images);
    let mut truth = Vec::with_capacity(images);
    for i in 0..images {
        let class = rng.random_range(0..CLASSES);
        let mut present = BTreeSet::new();
        let mut boxes = Vec::new();
        for &j in &candidates[&class] {
            let (on, conf) = if rng.random::<f64>() < 0.7 {
                present.insert(j);
                (true, 1.0 - rng.random::<f64>().powi(3) * 0.9)
            } else {
                (false, rng.random::<f64>() * 0.3)
            };
            if on || rng.random::<f64>() < 0.5 {
                boxes.push(BoundingBox {
                    coords: [0.0, 0.0, 10.0, 10.0],
                    confidence: conf,
                    concept: concepts[j].clone(),
                });
            }
        }
        records.push(DetectionRecord {
            image_id: format!("cub_{i:05}"),
            class_label: class,
            boxes,
        });
        truth.push(present);
    }
    let ids = records.iter().map(|r| r.image_id.clone()).collect();
    let embeddings = EmbeddingMatrix::new(ids, 2, vec![0.5; images * 2]).unwrap();
    Corpus {
        vocab: ConceptVocabulary::new(concepts, candidates).unwrap(),
        records,
        truth,
        embeddings,
    }
}

#[test]
fn concept_set_matches_brute_force_scan() {
    let c = corpus(3000, 1);
    for t in [0.0, 0.15, 0.5, 0.95] {
        let filtered = filter_detections(&c.records, t);
        let set = build_concept_set(&filtered, &c.vocab).unwrap();
        let mut seen: Vec<&str> = Vec::new();
        for r in &c.records {
            for b in &r.boxes {
                if b.confidence > t && !seen.contains(&b.concept.as_str()) {
                    seen.push(&b.concept);
                }
            }
        }
        assert_eq!(set.len(), seen.len());
        // vocabulary order
        let positions: Vec<usize> = set.iter().map(|s| c.vocab.index_of(s).unwrap()).collect();
        assert!(positions.windows(2).all(|p| p[0] < p[1]));
    }
}

#[test]
fn assembled_labels_match_single_pass_reference() {
    let c = corpus(3000, 2);
    let ds = assemble(&c.embeddings, &c.records, &c.vocab, 0.15).unwrap();
    assert_eq!(ds.len(), 3000);
    for (i, r) in c.records.iter().enumerate() {
        let mut bits = vec![false; ds.concept_set.len()];
        for b in &r.boxes {
            if b.confidence > 0.15 {
                let j = ds.concept_set.iter().position(|s| *s == b.concept).unwrap();
                bits[j] = true;
            }
        }
        assert_eq!(ds.concept_labels[i].bits(), &bits[..], "image {i}");
    }
    for j in 0..ds.concept_set.len() {
        assert!(
            ds.concept_labels.iter().any(|l| l.get(j)),
            "concept {j} never positive"
        );
    }
}

#[test]
fn lower_threshold_recovers_more_true_concepts() {
    let c = corpus(3000, 3);
    let truth: Vec<ConceptLabel> = c
        .truth
        .iter()
        .map(|s| ConceptLabel::from_bits((0..CONCEPTS).map(|j| s.contains(&j)).collect()))
        .collect();
    let recall_at = |t: f64| {
        let predicted: Vec<ConceptLabel> = filter_detections(&c.records, t)
            .iter()
            .map(|r| encode_labels(r, &c.vocab.concepts))
            .collect();
        annotation_precision_recall(&predicted, &truth)
            .unwrap()
            .mean_recall
            .unwrap()
    };
    let (r15, r20) = (recall_at(0.15), recall_at(0.20));
    assert!(r15 >= r20, "recall {r15} at 0.15 vs {r20} at 0.20");
}

#[test]
fn assembly_is_deterministic() {
    let c = corpus(500, 4);
    let a = assemble(&c.embeddings, &c.records, &c.vocab, 0.15).unwrap();
    let b = assemble(&c.embeddings, &c.records, &c.vocab, 0.15).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn raising_threshold_only_removes(seed in 0u64..1000, lo in 0.0f64..1.0, gap in 0.0f64..0.5) {
        let c = corpus(60, seed);
        let hi = (lo + gap).min(1.0);
        let a = assemble(&c.embeddings, &c.records, &c.vocab, lo).unwrap();
        let b = assemble(&c.embeddings, &c.records, &c.vocab, hi).unwrap();
        let fa = filter_detections(&c.records, lo);
        let fb = filter_detections(&c.records, hi);
        for (ra, rb) in fa.iter().zip(&fb) {
            prop_assert!(rb.boxes.len() <= ra.boxes.len());
            prop_assert!(rb.boxes.iter().all(|x| ra.boxes.contains(x)));
        }
        prop_assert!(b.concept_set.iter().all(|s| a.concept_set.contains(s)));
        for (la, lb) in a.concept_labels.iter().zip(&b.concept_labels) {
            for (jb, name) in b.concept_set.iter().enumerate() {
                let ja = a.concept_set.iter().position(|s| s == name).unwrap();
                prop_assert!(!lb.get(jb) || la.get(ja));
            }
        }
    }
}
