//! Solves the elastic-net regularization path for the final layer and
//! prints how sparsity and accuracy trade off along it.
//!
//!     cargo run --release --example sparse_path

mod common;

use cbmkit::sparse_final::{select_for_nec, solve_path, PathConfig};

fn main() {
    let f = common::fixture();
    let trained = common::train(&f);
    let s = common::split(&f, &trained);
    let cfg = PathConfig::default();
    let path = solve_path(
        &s.x_train,
        &s.y_train,
        &s.x_val,
        &s.y_val,
        f.model.config.classes,
        &cfg,
    )
    .expect("path solves");
    println!(
        "lambda_max {:.5}  lambda_min {:.6}",
        path.lambda_max, path.lambda_min
    );
    println!("{:>10} {:>6} {:>7} {:>7}", "lambda", "NEC", "train", "val");
    for e in &path.entries {
        println!(
            "{:>10.6} {:>6.2} {:>7.4} {:>7.4}",
            e.lambda, e.nec, e.train_accuracy, e.val_accuracy
        );
    }
    for target in [1.0, 3.0, 5.0] {
        let layer = select_for_nec(&path, target).expect("non-empty path");
        println!(
            "NEC target {target}: selected layer has {} nonzeros over {} classes",
            layer.nonzeros(),
            layer.num_classes()
        );
    }
}
