//! Trains the concept bottleneck on detector labels and scores each concept
//! against the generator's noiseless ground truth.
//!
//!     cargo run --release --example train_cbl

mod common;

use cbmkit::cbl::per_concept_auc;

fn main() {
    let f = common::fixture();
    let trained = common::train(&f);
    println!("positive loss scale {:.2}", trained.pos_scale);
    for e in trained.log.iter().step_by(5) {
        let aucs: Vec<f64> = e.val_auc.iter().flatten().copied().collect();
        println!(
            "epoch {:>2}  train loss {:.4}  mean val AUC (detector labels) {:.4}",
            e.epoch,
            e.train_loss,
            aucs.iter().sum::<f64>() / aucs.len() as f64
        );
    }
    let logits = trained
        .bottleneck
        .concept_logits(&f.test.embeddings.to_matrix(), true)
        .expect("dims match");
    let aucs = per_concept_auc(&logits, &f.test.clean_concepts);
    println!("test AUC against planted truth:");
    for (name, auc) in f.dataset.concept_set.iter().zip(&aucs) {
        println!(
            "  {name:<12} {}",
            auc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
    }
}
