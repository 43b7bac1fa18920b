//! Per-sample explanations: the concepts that contributed most to the
//! predicted class, with `NOT` marking concepts judged absent.
//!
//!     cargo run --release --example explain_decisions

mod common;

use cbmkit::explain::{explain_batch, negative_reasoning_rate};
use cbmkit::sparse_final::{select_for_nec, solve_path, PathConfig};

fn main() {
    let f = common::fixture();
    let trained = common::train(&f);
    let s = common::split(&f, &trained);
    let path = solve_path(
        &s.x_train,
        &s.y_train,
        &s.x_val,
        &s.y_val,
        f.model.config.classes,
        &PathConfig::default(),
    )
    .expect("path solves");
    let layer = select_for_nec(&path, 5.0).expect("non-empty path");
    let concepts = trained
        .bottleneck
        .concept_logits(&f.test.embeddings.to_matrix(), true)
        .expect("dims match");
    let ids = f.test.embeddings.ids().to_vec();
    let all =
        explain_batch(&layer, &concepts, &f.dataset.concept_set, &ids, 5).expect("dims match");

    for (e, truth) in all.iter().zip(&f.test.class_labels).take(4) {
        println!(
            "{}: predicted class {} (true {truth}), logit {:.3}",
            e.sample_id, e.predicted_class, e.class_logit
        );
        for entry in &e.entries {
            println!("    {:<14} {:+.3}", entry.concept, entry.contribution);
        }
        println!("    {:<14} {:+.3}", "(bias)", e.bias);
        println!("    {:<14} {:+.3}", "(rest)", e.remainder);
    }
    println!(
        "share of listed concepts that are negated: {:.3}",
        negative_reasoning_rate(&all)
    );
}
