//! Test accuracy at fixed NEC levels for the trained bottleneck, a random
//! bottleneck of larger width and an unregularized dense final layer.
//!
//!     cargo run --release --example anec_eval

mod common;

use cbmkit::leakage::random_cbl_baseline;
use cbmkit::metrics::{accuracy_from_logits, anec};
use cbmkit::sparse_final::{solve_elastic_net, solve_path, PathConfig, SolverOptions};

fn main() {
    let f = common::fixture();
    let trained = common::train(&f);
    let s = common::split(&f, &trained);
    let classes = f.model.config.classes;
    let cfg = PathConfig::default();
    let levels = [1, 2, 3, 5, 10];
    let z_test = f.test.embeddings.to_matrix();

    let path =
        solve_path(&s.x_train, &s.y_train, &s.x_val, &s.y_val, classes, &cfg).expect("path solves");
    let ours = anec(
        &path,
        &trained.bottleneck,
        &z_test,
        &f.test.class_labels,
        &levels,
    )
    .expect("dims match");

    let z = f.dataset.embeddings.to_matrix();
    let random = random_cbl_baseline(
        &common::rows(&z, &trained.train_rows),
        &s.y_train,
        &common::rows(&z, &trained.val_rows),
        &s.y_val,
        classes,
        64,
        11,
        &cfg,
    )
    .expect("baseline solves");
    let theirs = anec(
        &random.path,
        &random.bottleneck,
        &z_test,
        &f.test.class_labels,
        &levels,
    )
    .expect("dims match");

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
        .concept_logits(&z_test, true)
        .expect("dims match");
    let dense_acc = accuracy_from_logits(&dense.logits(&concepts), &f.test.class_labels);

    println!("{:>5} {:>9} {:>10}", "NEC", "trained", "random-64");
    for l in levels {
        println!(
            "{l:>5} {:>9.4} {:>10.4}",
            ours.per_nec[&l], theirs.per_nec[&l]
        );
    }
    println!("dense final layer: {dense_acc:.4}");
    println!(
        "ANEC-avg trained {:.4}, random {:.4}",
        ours.anec_avg, theirs.anec_avg
    );
}
