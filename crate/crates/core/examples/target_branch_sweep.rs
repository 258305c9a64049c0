//! Three simplified methods × three target-branch kinds, run in parallel.
//!
//! cargo run --release --example target_branch_sweep [output_dir]

use siamese_grad::cli::{cmd_sweep, ExperimentConfig};
use siamese_grad::trainer::TrainConfig;

fn main() -> siamese_grad::Result<()> {
    let output_dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("siamese_grad_sweep"));
    let cfg = ExperimentConfig {
        train: TrainConfig {
            steps: 600,
            lr: 0.005,
            ..TrainConfig::default()
        },
        output_dir,
        ..ExperimentConfig::default()
    };
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let report = cmd_sweep(&cfg, jobs)?;
    for cell in &report.cells {
        match &cell.outcome {
            Ok(r) => println!(
                "{:<28} {:<14} knn {:.3}  |cos| {:.3}  pc90 {:>2}",
                cell.method, cell.target_kind, r.knn_acc, r.neg_abs_cos_mean, r.pc90_rank
            ),
            Err(step) => println!("{:<28} {:<14} diverged at step {step}", cell.method, cell.target_kind),
        }
    }
    println!("CSVs in {}", cfg.output_dir.display());
    Ok(())
}
