//! Writes a planted fixture to disk in the interchange formats, then builds
//! the auxiliary dataset from those files at a few detector thresholds.
//!
//!     cargo run --release --example build_dataset

mod common;

use cbmkit::dataset::{annotation_precision_recall, assemble_from_files, ConceptLabel};
use cbmkit::formats::{write_detections, write_embeddings, write_vocabulary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let f = common::fixture();
    let dir = std::env::temp_dir().join("cbmkit-build-dataset");
    std::fs::create_dir_all(&dir)?;
    let (emb, det, voc) = (
        dir.join("embeddings.vlgc"),
        dir.join("detections.jsonl"),
        dir.join("vocabulary.jsonl"),
    );
    write_embeddings(&f.train.embeddings, &emb)?;
    write_detections(&f.train.detections, &det)?;
    let vocab = f.model.vocabulary();
    write_vocabulary(&vocab, &voc)?;
    println!("fixture written to {}", dir.display());

    println!(
        "{:>9} {:>8} {:>9} {:>9} {:>7}",
        "threshold", "concepts", "precision", "recall", "pos/img"
    );
    for threshold in [0.05, 0.15, 0.3, 0.6] {
        let (_, _, ds) = assemble_from_files(&emb, &det, &voc, threshold)?;
        // ground truth restricted to the retained concepts, in the same order
        let cols: Vec<usize> = ds
            .concept_set
            .iter()
            .map(|c| vocab.index_of(c).expect("known concept"))
            .collect();
        let truth: Vec<ConceptLabel> = f
            .train
            .clean_concepts
            .iter()
            .map(|l| ConceptLabel::from_bits(cols.iter().map(|&j| l.get(j)).collect()))
            .collect();
        let pr = annotation_precision_recall(&ds.concept_labels, &truth)?;
        let density = ds
            .concept_labels
            .iter()
            .map(|l| l.count_ones())
            .sum::<usize>() as f64
            / ds.len() as f64;
        println!(
            "{threshold:>9.2} {:>8} {:>9.3} {:>9.3} {density:>7.2}",
            ds.num_concepts(),
            pr.mean_precision.unwrap_or(f64::NAN),
            pr.mean_recall.unwrap_or(f64::NAN),
        );
    }
    Ok(())
}
