//! UniGrad with and without its negative gradient on the default synthetic data.
//!
//! cargo run --release --example collapse_dichotomy

use siamese_grad::methods::{Method, MethodConfig};
use siamese_grad::trainer::{train_run, DatasetConfig, TrainConfig};

fn main() -> siamese_grad::Result<()> {
    let data = DatasetConfig::default().generate(0)?;
    for lambda in [0.0, 100.0] {
        let cfg = TrainConfig {
            method: Method::Unigrad,
            lr: 0.001,
            log_every: 250,
            method_config: MethodConfig {
                lambda_balance: Some(lambda),
                ..MethodConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train_run(&cfg, &data)?;
        println!("λ = {lambda}");
        println!("  {:>5} {:>9} {:>8} {:>8} {:>6} {:>5}", "step", "loss", "pos cos", "|cos|", "knn", "pc90");
        for r in out.log.rows() {
            println!(
                "  {:>5} {:>9.4} {:>8.3} {:>8.3} {:>6.3} {:>5}",
                r.step, r.loss, r.pos_cos_mean, r.neg_abs_cos_mean, r.knn_acc, r.pc90_rank
            );
        }
    }
    Ok(())
}
