//! Monte-Carlo check that a random linear bottleneck of width k lets a
//! linear readout approximate any linear function of the embedding, with
//! error at most (1 - k/d) λ_max(Σ) ‖w‖² on average and zero once k ≥ d.
//!
//!     cargo run --release --example verify_theorem

use cbmkit::leakage::{run_leakage_experiment, LeakageSetup};

fn main() {
    let d = 24;
    let setup = LeakageSetup::random(d, 1, vec![1, 4, 8, 12, 16, 20, 23, 24, 32], 400, 5);
    let result = run_leakage_experiment(&setup).expect("valid setup");
    println!("d = {d}, lambda_max(Σ) = {:.4}", result.lambda_max);
    println!(
        "{:>4} {:>12} {:>10} {:>12}",
        "k", "mean error", "std err", "bound"
    );
    for r in &result.per_k {
        println!(
            "{:>4} {:>12.5} {:>10.5} {:>12.5}",
            r.k, r.mean_error, r.std_error, r.bound
        );
    }
    let check = result.check(d);
    println!(
        "bound holds: {}  exact recovery for k >= d: {}  decreasing in k: {}",
        check.bound_holds, check.exact_recovery, check.strictly_decreasing
    );
}
