//! Train a few methods and render their trajectories as SVG line charts.
//!
//! cargo run --release --example trajectory_plot [output_dir]

use std::fs;

use siamese_grad::methods::{Method, MethodConfig};
use siamese_grad::plot::{LineChart, Series};
use siamese_grad::trainer::{train_run, DatasetConfig, TrainConfig};

fn main() -> siamese_grad::Result<()> {
    let out_dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("siamese_grad_plot"));
    fs::create_dir_all(&out_dir)?;
    let data = DatasetConfig::default().generate(0)?;

    let runs = [
        ("simclr_simplified", Method::SimclrSimplified, None),
        ("vicreg_simplified", Method::VicregSimplified, None),
        ("unigrad", Method::Unigrad, Some(100.0)),
        ("unigrad_no_negative", Method::Unigrad, Some(0.0)),
    ];
    let mut logs = Vec::new();
    for (name, method, lambda) in runs {
        let cfg = TrainConfig {
            method,
            lr: 0.001,
            steps: 1000,
            log_every: 50,
            method_config: MethodConfig {
                lambda_balance: lambda,
                ..MethodConfig::default()
            },
            ..TrainConfig::default()
        };
        let log = train_run(&cfg, &data)?.log;
        fs::write(out_dir.join(format!("{name}.csv")), log.to_csv_string()?)?;
        logs.push((name, log));
    }
    for column in ["pos_cos_mean", "neg_abs_cos_mean", "knn_acc"] {
        let series = logs
            .iter()
            .map(|(name, log)| Series::from_log(*name, log, column))
            .collect::<siamese_grad::Result<Vec<_>>>()?;
        let chart = LineChart {
            title: column.into(),
            x_label: "step".into(),
            y_label: column.into(),
            series,
            header: None,
        };
        let path = out_dir.join(format!("{column}.svg"));
        fs::write(&path, chart.to_svg()?)?;
        println!("{}", path.display());
    }
    Ok(())
}
