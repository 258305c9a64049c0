use std::fs;
use std::path::Path;
use std::process::Command;

use siamese_grad::cli::{ExperimentConfig, EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK};
use siamese_grad::metrics::TrajectoryLog;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_siamese-grad"))
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        r#"{{
  "train": {{"steps": 40, "batch_n": 32, "log_every": 10, "lr": 0.005, "eval_subsample": 64}},
  "dataset": {{"num_points": 256, "dim": 8}},
  "methods": ["simclr_simplified", "byol_directpred_simplified", "vicreg_simplified"],
  "verify": {{"seeds": 2, "sizes": [[2, 4], [4, 8]]}}{extra}
}}"#
    );
    let p = dir.join("cfg.json");
    fs::write(&p, text).unwrap();
    p
}

fn status(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

#[test]
fn verify_writes_report_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("v");
    let code = status(bin().args(["verify", "--config"]).arg(&cfg).arg("--output-dir").arg(&out));
    assert_eq!(code, EXIT_OK);
    let csv = fs::read_to_string(out.join("verify.csv")).unwrap();
    assert!(csv.starts_with("# config: "));
    assert!(csv.lines().nth(1).unwrap() == "method,variant,N,C,seed,max_rel_err,pass");
    assert!(csv.lines().skip(2).all(|l| l.ends_with(",true")));
}

#[test]
fn sweep_grid_shares_dataset_and_reruns_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("s");
    let code = status(
        bin()
            .args(["sweep", "--jobs", "3", "--seed", "5", "--config"])
            .arg(&cfg)
            .arg("--output-dir")
            .arg(&out),
    );
    assert_eq!(code, EXIT_OK);
    let csvs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv") && !p.to_string_lossy().contains(".predictor"))
        .filter(|p| p.file_stem().unwrap() != "summary")
        .collect();
    assert_eq!(csvs.len(), 9);
    let hashes: Vec<_> = csvs
        .iter()
        .map(|p| TrajectoryLog::read_csv(fs::File::open(p).unwrap()).unwrap().dataset_hash.unwrap())
        .collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));

    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().filter(|l| !l.starts_with('#')).count(), 10);
    for line in summary.lines().skip(2) {
        let knn = line.split(',').nth(7).unwrap();
        assert!(knn.parse::<f64>().is_ok(), "{line}");
    }

    // re-running from the embedded header reproduces the file
    let first = &csvs[0];
    let before = fs::read(first).unwrap();
    let code = status(
        bin()
            .args(["sweep", "--jobs", "1", "--seed", "5", "--config"])
            .arg(&cfg)
            .arg("--output-dir")
            .arg(&out),
    );
    assert_eq!(code, EXIT_OK);
    assert_eq!(fs::read(first).unwrap(), before);
}

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), r#", "plot_series": ["pos_cos_mean", "knn_acc"]"#);
    let out = dir.path().join("t");
    assert_eq!(status(bin().args(["train", "--config"]).arg(&cfg).arg("--output-dir").arg(&out)), EXIT_OK);
    let log_path = out.join("unigrad__stop_gradient.csv");
    let log = TrajectoryLog::read_csv(fs::File::open(&log_path).unwrap()).unwrap();
    assert_eq!(log.rows().last().unwrap().step, 40);
    assert!(log.config.as_deref().unwrap().contains("\"seed\":0"));

    assert_eq!(status(bin().args(["eval", "--config"]).arg(&cfg).arg("--output-dir").arg(&out)), EXIT_OK);
    let eval = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert!(eval.contains("\nraw_input,") && eval.contains("\nuntrained_network,"));

    let code = status(bin().args(["plot", "--config"]).arg(&cfg).arg("--output-dir").arg(&out).arg(&log_path));
    assert_eq!(code, EXIT_OK);
    let svg = fs::read_to_string(out.join("pos_cos_mean.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert!(svg.contains("unigrad__stop_gradient"));
    assert!(out.join("knn_acc.svg").exists());
}

#[test]
fn usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    assert_eq!(status(bin().arg("plot").arg("--output-dir").arg(&out)), EXIT_CONFIG);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"trian": {}}"#).unwrap();
    assert_eq!(status(bin().args(["train", "--config"]).arg(&bad)), EXIT_CONFIG);

    let cfg = tiny_config(dir.path(), r#", "plot_series": ["nope"]"#);
    let log = dir.path().join("x.csv");
    fs::write(&log, "step,loss,pos_cos_mean,neg_cos_mean,neg_abs_cos_mean,knn_acc,pc90_rank,lambda_diag\n").unwrap();
    assert_eq!(status(bin().args(["plot", "--config"]).arg(&cfg).arg(&log)), EXIT_CONFIG);
}

#[test]
fn divergence_is_flagged_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{
  "train": {"steps": 30, "batch_n": 32, "log_every": 10, "lr": 1e6, "eval_subsample": 64},
  "dataset": {"num_points": 256, "dim": 8},
  "methods": ["vicreg_full", "simclr_simplified"],
  "target_kinds": ["stop_gradient"]
}"#;
    let cfg_path = dir.path().join("c.json");
    fs::write(&cfg_path, text).unwrap();
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let out = dir.path().join("d");
    let code = status(bin().args(["sweep", "--config"]).arg(&cfg_path).arg("--output-dir").arg(&out));
    assert_eq!(code, EXIT_DIVERGED);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.contains("vicreg_full,stop_gradient,true"), "{summary}");
    assert_eq!(cfg.methods.len(), 2);
}
