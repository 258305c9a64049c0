//! Operator entry point: experiment config, the five subcommands, and file output.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::methods::Method;
use crate::metrics::{
    knn_accuracy, negative_cosine, principal_component_ratio, TrajectoryLog, TrajectoryRow, DEFAULT_KNN_K,
    DEFAULT_PC_THRESHOLD, TRAJECTORY_COLUMNS,
};
use crate::numerics::FeatureBatch;
use crate::plot::{LineChart, Series};
use crate::predictor::write_diagnostics_csv;
use crate::trainer::{forward, initial_params, train_run, DatasetConfig, TargetBranch, TrainConfig, TrainOutcome};
use crate::verify::{run_verify, VerifyConfig, VerifyReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Verify,
    Train,
    Sweep,
    Eval,
    Plot,
}

/// The single JSON document describing an experiment. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// optional; when present it must agree with the subcommand
    pub command: Option<Command>,
    pub train: TrainConfig,
    /// sweep rows
    pub methods: Vec<Method>,
    /// sweep columns
    pub target_kinds: Vec<TargetBranch>,
    pub output_dir: PathBuf,
    pub plot_series: Vec<String>,
    pub dataset: DatasetConfig,
    pub verify: VerifyConfig,
    /// trajectory CSVs for `plot`
    pub logs: Vec<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            command: None,
            train: TrainConfig::default(),
            methods: vec![
                Method::SimclrSimplified,
                Method::ByolDirectpredSimplified,
                Method::VicregSimplified,
            ],
            target_kinds: vec![TargetBranch::StopGradient, TargetBranch::Momentum, TargetBranch::Mixed],
            output_dir: PathBuf::from("out"),
            plot_series: vec!["pos_cos_mean".into()],
            dataset: DatasetConfig::default(),
            verify: VerifyConfig::default(),
            logs: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(c) = self.plot_series.iter().find(|c| !TRAJECTORY_COLUMNS.contains(&c.as_str())) {
            return Err(Error::UnknownIdentifier(c.clone()));
        }
        Ok(())
    }

    /// Provenance string embedded in every output: everything needed to re-run.
    pub fn header(&self, train: &TrainConfig) -> Result<String> {
        #[derive(Serialize)]
        struct Header<'a> {
            seed: u64,
            dataset: &'a DatasetConfig,
            train: &'a TrainConfig,
        }
        Ok(serde_json::to_string(&Header {
            seed: train.seed,
            dataset: &self.dataset,
            train,
        })?)
    }
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Map an error to the process exit status.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let report = run_verify(&cfg.verify);
    fs::create_dir_all(&cfg.output_dir)?;
    let mut buf = Vec::new();
    writeln!(buf, "# config: {}", serde_json::to_string(&cfg.verify)?)?;
    report.write_csv(&mut buf)?;
    write_atomic(&cfg.output_dir.join("verify.csv"), &buf)?;
    write_atomic(&cfg.output_dir.join("verify.txt"), report.summary_table().as_bytes())?;
    Ok(report)
}

fn run_cell(cfg: &ExperimentConfig, train: &TrainConfig, stem: &str) -> Result<TrainOutcome> {
    let data = cfg.dataset.generate(train.seed)?;
    let mut out = train_run(train, &data)?;
    out.log.config = Some(cfg.header(train)?);
    write_atomic(&cfg.output_dir.join(format!("{stem}.csv")), out.log.to_csv_string()?.as_bytes())?;
    if !out.diagnostics.is_empty() {
        let mut buf = Vec::new();
        writeln!(buf, "# config: {}", cfg.header(train)?)?;
        write_diagnostics_csv(&mut buf, &out.diagnostics)?;
        write_atomic(&cfg.output_dir.join(format!("{stem}.predictor.csv")), &buf)?;
    }
    Ok(out)
}

pub fn cell_stem(method: Method, target: TargetBranch) -> String {
    format!("{method}__{target}")
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    run_cell(cfg, &cfg.train, &cell_stem(cfg.train.method, cfg.train.target_kind))
}

/// One cell of the sweep grid: either its final log row or the step it diverged at.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub method: Method,
    pub target_kind: TargetBranch,
    pub outcome: std::result::Result<TrajectoryRow, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn any_diverged(&self) -> bool {
        self.cells.iter().any(|c| c.outcome.is_err())
    }

    pub fn to_csv(&self, header: &str) -> Result<String> {
        let mut buf = Vec::new();
        writeln!(buf, "# config: {header}")?;
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "method",
            "target_kind",
            "diverged",
            "step",
            "loss",
            "pos_cos_mean",
            "neg_abs_cos_mean",
            "knn_acc",
            "pc90_rank",
        ])?;
        for c in &self.cells {
            let (m, t) = (c.method.to_string(), c.target_kind.to_string());
            match &c.outcome {
                Ok(r) => w.write_record([
                    m,
                    t,
                    "false".into(),
                    r.step.to_string(),
                    r.loss.to_string(),
                    r.pos_cos_mean.to_string(),
                    r.neg_abs_cos_mean.to_string(),
                    r.knn_acc.to_string(),
                    r.pc90_rank.to_string(),
                ])?,
                Err(step) => w.write_record([m, t, "true".into(), step.to_string(), "".into(), "".into(), "".into(), "".into(), "".into()])?,
            }
        }
        w.flush()?;
        drop(w);
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Train every (method, target kind) cell on a shared dataset, in parallel up to `jobs`.
pub fn cmd_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.methods.is_empty() || cfg.target_kinds.is_empty() {
        return Err(Error::Config("sweep needs at least one method and one target kind".into()));
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let grid: Vec<(Method, TargetBranch)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.target_kinds.iter().map(move |&t| (m, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<SweepCell>> = pool.install(|| {
        grid.par_iter()
            .map(|&(method, target_kind)| {
                let train = TrainConfig {
                    method,
                    target_kind,
                    ..cfg.train.clone()
                };
                let outcome = match run_cell(cfg, &train, &cell_stem(method, target_kind)) {
                    Ok(out) => Ok(out.log.last().cloned().ok_or_else(|| Error::Config("empty trajectory".into()))?),
                    Err(Error::Diverged { step, .. }) => Err(step),
                    Err(e) => return Err(e),
                };
                Ok(SweepCell {
                    method,
                    target_kind,
                    outcome,
                })
            })
            .collect()
    });
    let cells = results.into_iter().collect::<Result<Vec<_>>>()?;
    let report = SweepReport { cells };
    let summary = report.to_csv(&cfg.header(&cfg.train)?)?;
    write_atomic(&cfg.output_dir.join("summary.csv"), summary.as_bytes())?;
    Ok(report)
}

/// Feature-quality baselines that need no training.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub knn_acc: f64,
    pub pc90_rank: usize,
    pub neg_cos_mean: f64,
    pub neg_abs_cos_mean: f64,
}

fn evaluate(name: &str, features: &FeatureBatch, labels: &[usize], seed: u64) -> Result<EvalRow> {
    let (neg_cos_mean, neg_abs_cos_mean) = negative_cosine(features)?;
    Ok(EvalRow {
        name: name.into(),
        knn_acc: knn_accuracy(features, labels, DEFAULT_KNN_K, seed)?,
        pc90_rank: principal_component_ratio(features, DEFAULT_PC_THRESHOLD)?,
        neg_cos_mean,
        neg_abs_cos_mean,
    })
}

/// Raw inputs and the untrained network, on the configured dataset and seed.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let seed = cfg.train.seed;
    let data = cfg.dataset.generate(seed)?;
    let raw = FeatureBatch::raw(data.points.clone());
    let params = initial_params(seed, data.dim())?;
    let norm = cfg.train.method_config.norm_for(cfg.train.method);
    let (untrained, _) = forward(&params, &data.points, norm)?;
    let rows = vec![
        evaluate("raw_input", &raw, &data.labels, seed)?,
        evaluate("untrained_network", &untrained, &data.labels, seed)?,
    ];

    fs::create_dir_all(&cfg.output_dir)?;
    let mut buf = Vec::new();
    writeln!(buf, "# config: {}", cfg.header(&cfg.train)?)?;
    writeln!(buf, "# dataset_hash: {}", data.hash())?;
    let mut w = csv::Writer::from_writer(&mut buf);
    w.write_record(["name", "knn_acc", "pc90_rank", "neg_cos_mean", "neg_abs_cos_mean"])?;
    for r in &rows {
        w.write_record([
            r.name.clone(),
            r.knn_acc.to_string(),
            r.pc90_rank.to_string(),
            r.neg_cos_mean.to_string(),
            r.neg_abs_cos_mean.to_string(),
        ])?;
    }
    w.flush()?;
    drop(w);
    write_atomic(&cfg.output_dir.join("eval.csv"), &buf)?;
    Ok(rows)
}

/// One SVG per requested column, one polyline per log.
pub fn cmd_plot(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    if cfg.logs.is_empty() {
        return Err(Error::Config("usage: plot needs at least one trajectory CSV".into()));
    }
    if cfg.plot_series.is_empty() {
        return Err(Error::Config("usage: plot_series is empty".into()));
    }
    cfg.validate()?;
    let mut logs = Vec::with_capacity(cfg.logs.len());
    for path in &cfg.logs {
        let log = TrajectoryLog::read_csv(fs::File::open(path)?)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        logs.push((stem, log));
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let mut written = Vec::new();
    for column in &cfg.plot_series {
        let series = logs
            .iter()
            .map(|(stem, log)| Series::from_log(stem.clone(), log, column))
            .collect::<Result<Vec<_>>>()?;
        let sources: Vec<String> = cfg.logs.iter().map(|p| p.display().to_string()).collect();
        let chart = LineChart {
            title: column.clone(),
            x_label: "step".into(),
            y_label: column.clone(),
            series,
            header: Some(format!("series: {column}; logs: {}", sources.join(", "))),
        };
        let path = cfg.output_dir.join(format!("{column}.svg"));
        write_atomic(&path, chart.to_svg()?.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Parser)]
#[command(name = "siamese-grad", about = "Unified siamese gradients: verify, train, sweep, eval, plot")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// JSON experiment config
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// overrides train.seed (also seeds the dataset)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Check every analytic gradient against finite differences
    Verify(CommonArgs),
    /// Train one (method, target kind) configuration
    Train(CommonArgs),
    /// Train the method × target-kind grid
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// parallel cells
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Baselines on raw inputs and the untrained network
    Eval(CommonArgs),
    /// Render trajectory CSVs as SVG line charts
    Plot {
        #[command(flatten)]
        common: CommonArgs,
        /// trajectory CSVs (appended to `logs` from the config)
        logs: Vec<PathBuf>,
    },
}

impl CliCommand {
    fn kind(&self) -> Command {
        match self {
            CliCommand::Verify(_) => Command::Verify,
            CliCommand::Train(_) => Command::Train,
            CliCommand::Sweep { .. } => Command::Sweep,
            CliCommand::Eval(_) => Command::Eval,
            CliCommand::Plot { .. } => Command::Plot,
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            CliCommand::Verify(c) | CliCommand::Train(c) | CliCommand::Eval(c) => c,
            CliCommand::Sweep { common, .. } | CliCommand::Plot { common, .. } => common,
        }
    }
}

/// Resolve the config file plus flag overrides.
pub fn resolve(cmd: &CliCommand) -> Result<ExperimentConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(c) = cfg.command {
        if c != cmd.kind() {
            return Err(Error::Config(format!("config is for `{c:?}`, invoked as `{:?}`", cmd.kind())));
        }
    }
    cfg.command = Some(cmd.kind());
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let CliCommand::Plot { logs, .. } = cmd {
        cfg.logs.extend(logs.iter().cloned());
    }
    Ok(cfg)
}

fn execute(cmd: &CliCommand) -> Result<i32> {
    let cfg = resolve(cmd)?;
    match cmd {
        CliCommand::Verify(_) => {
            let report = cmd_verify(&cfg)?;
            print!("{}", report.summary_table());
            Ok(report.exit_code())
        }
        CliCommand::Train(_) => {
            let out = cmd_train(&cfg)?;
            if let Some(r) = out.log.last() {
                println!(
                    "step {}  loss {:.4}  knn {:.3}  pc90 {}  |cos| {:.3}",
                    r.step, r.loss, r.knn_acc, r.pc90_rank, r.neg_abs_cos_mean
                );
            }
            Ok(EXIT_OK)
        }
        CliCommand::Sweep { jobs, .. } => {
            let report = cmd_sweep(&cfg, *jobs)?;
            for c in &report.cells {
                match &c.outcome {
                    Ok(r) => println!("{:<28} {:<14} knn {:.3}  pc90 {:>2}", c.method, c.target_kind, r.knn_acc, r.pc90_rank),
                    Err(step) => println!("{:<28} {:<14} diverged at step {step}", c.method, c.target_kind),
                }
            }
            Ok(if report.any_diverged() { EXIT_DIVERGED } else { EXIT_OK })
        }
        CliCommand::Eval(_) => {
            for r in cmd_eval(&cfg)? {
                println!("{:<18} knn {:.3}  pc90 {:>2}  |cos| {:.3}", r.name, r.knn_acc, r.pc90_rank, r.neg_abs_cos_mean);
            }
            Ok(EXIT_OK)
        }
        CliCommand::Plot { .. } => {
            for p in cmd_plot(&cfg)? {
                println!("{}", p.display());
            }
            Ok(EXIT_OK)
        }
    }
}

/// Parse arguments, run, and return the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"bogus": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"methods": ["not_a_method"]}"#).is_err());
        let cfg = ExperimentConfig::from_json(r#"{"command": "sweep", "methods": ["unigrad"]}"#).unwrap();
        assert_eq!(cfg.methods, vec![Method::Unigrad]);
        assert_eq!(cfg.command, Some(Command::Sweep));
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn bad_plot_column_is_a_config_error() {
        let cfg = ExperimentConfig {
            plot_series: vec!["nope".into()],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::UnknownIdentifier(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code_for(&Error::Diverged { step: 1, loss: f64::NAN }), EXIT_DIVERGED);
        assert_eq!(exit_code_for(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(run(["siamese-grad", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(run(["siamese-grad", "plot"]), EXIT_CONFIG);
    }

    #[test]
    fn command_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"command": "verify"}"#).unwrap();
        let cmd = CliCommand::Train(CommonArgs {
            config: Some(path),
            output_dir: None,
            seed: Some(3),
        });
        assert!(matches!(resolve(&cmd), Err(Error::Config(_))));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_atomic(&p, b"x").unwrap();
        write_atomic(&p, b"y").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"y");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
