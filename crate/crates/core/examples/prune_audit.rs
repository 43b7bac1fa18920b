//! How much predictions move when each class row keeps only its five
//! largest weights, for a sparse final layer and for a dense one.
//!
//!     cargo run --release --example prune_audit

mod common;

use cbmkit::metrics::{nonzero_distribution, prediction_change_on_concepts};
use cbmkit::sparse_final::{
    select_for_nec, solve_elastic_net, solve_path, PathConfig, SolverOptions,
};

fn main() {
    let f = common::fixture();
    let trained = common::train(&f);
    let s = common::split(&f, &trained);
    let classes = f.model.config.classes;
    let cfg = PathConfig::default();
    let path =
        solve_path(&s.x_train, &s.y_train, &s.x_val, &s.y_val, classes, &cfg).expect("path solves");
    let sparse = select_for_nec(&path, 5.0).expect("non-empty path");
    let dense = solve_elastic_net(
        &s.x_train,
        &s.y_train,
        classes,
        0.0,
        cfg.alpha_mix,
        None,
        SolverOptions::default(),
    )
    .expect("dense solve");
    let concepts = trained
        .bottleneck
        .concept_logits(&f.test.embeddings.to_matrix(), true)
        .expect("dims match");
    for (name, layer) in [("NEC-5", &sparse), ("dense", &dense)] {
        let dist = nonzero_distribution(layer);
        println!(
            "{name:<6} nonzeros per class {:?}, prediction change after top-5 cut {:.2}%",
            dist.per_class,
            100.0 * prediction_change_on_concepts(layer, &concepts, 5)
        );
    }
}
