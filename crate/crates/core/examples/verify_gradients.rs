//! Full finite-difference verification suite with its summary table.
//!
//! cargo run --release --example verify_gradients

use siamese_grad::verify::{run_verify, VerifyConfig};

fn main() {
    let report = run_verify(&VerifyConfig::default());
    print!("{}", report.summary_table());
    for row in report.failures() {
        println!("FAILED {} / {} N={} C={} seed={} err={:.2e}", row.method, row.variant, row.n, row.c, row.seed, row.max_rel_err);
    }
    std::process::exit(report.exit_code());
}
