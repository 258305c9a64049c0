//! Desk-scale siamese training loop: MLP encoder, three target-branch types plus
//! the mixed positive-only momentum mode, SGD with momentum, cosine EMA.

pub mod data;
pub mod mlp;
pub mod schedule;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{augment, augment_batch, generate_dataset, AugmentParams, DatasetConfig, SyntheticDataset};
pub use mlp::{backward, default_dims, forward, ForwardCache, Layer, MlpGrads, MlpParams};
pub use schedule::{ema_update, momentum_at, SiameseState};


use crate::error::{Error, Result};
use crate::methods::{
    method_loss, unified_grad, BatchViews, GradState, GradientDecomposition, MemoryBank, Method, MethodConfig,
    NormMode, TargetKind,
};
use crate::metrics::{
    knn_accuracy, negative_cosine, positive_cosine, principal_component_ratio, TrajectoryLog, TrajectoryRow,
    DEFAULT_KNN_K, DEFAULT_PC_THRESHOLD,
};
use crate::numerics::{DenseMatrix, FeatureBatch};
use crate::predictor::{compute_predictor, CorrelationState, PredictorDiagnostics, PredictorMatrix};

/// Target-branch configuration, including the mixed mode in which only the
/// positive gradient sees the momentum encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetBranch {
    WeightSharing,
    StopGradient,
    Momentum,
    Mixed,
}

impl TargetBranch {
    pub const ALL: [TargetBranch; 4] = [
        TargetBranch::WeightSharing,
        TargetBranch::StopGradient,
        TargetBranch::Momentum,
        TargetBranch::Mixed,
    ];

    pub fn uses_ema(self) -> bool {
        matches!(self, TargetBranch::Momentum | TargetBranch::Mixed)
    }

    pub fn view_kind(self) -> TargetKind {
        match self {
            TargetBranch::WeightSharing => TargetKind::WeightSharing,
            TargetBranch::StopGradient => TargetKind::StopGradient,
            TargetBranch::Momentum | TargetBranch::Mixed => TargetKind::Momentum,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            TargetBranch::WeightSharing => "weight_sharing",
            TargetBranch::StopGradient => "stop_gradient",
            TargetBranch::Momentum => "momentum",
            TargetBranch::Mixed => "mixed",
        }
    }
}

impl std::fmt::Display for TargetBranch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.id())
    }
}

impl std::str::FromStr for TargetBranch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TargetBranch::ALL
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| Error::UnknownIdentifier(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_n: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub momentum_init: f64,
    pub momentum_final: f64,
    pub method: Method,
    pub method_config: MethodConfig,
    pub seed: u64,
    pub log_every: usize,
    pub target_kind: TargetBranch,
    /// samples used for the pairwise-similarity and loss columns of the log
    pub eval_subsample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_n: 128,
            lr: 0.025,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            momentum_init: 0.996,
            momentum_final: 1.0,
            method: Method::Unigrad,
            method_config: MethodConfig::default(),
            seed: 0,
            log_every: 100,
            target_kind: TargetBranch::StopGradient,
            eval_subsample: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.method_config.validate()?;
        // lr = 0 is allowed: it freezes the network, which is useful as a baseline
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", "must be nonnegative and finite"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::param("sgd_momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param("weight_decay", "must be nonnegative"));
        }
        if !(0.0 <= self.momentum_init && self.momentum_init <= self.momentum_final && self.momentum_final <= 1.0) {
            return Err(Error::param("momentum_init/final", "need 0 ≤ init ≤ final ≤ 1"));
        }
        if self.batch_n < 2 {
            return Err(Error::param("batch_n", "need at least two samples per batch"));
        }
        if self.log_every == 0 {
            return Err(Error::param("log_every", "must be positive"));
        }
        if self.eval_subsample < 2 {
            return Err(Error::param("eval_subsample", "need at least two samples"));
        }
        Ok(())
    }
}

/// Result of one run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrajectoryLog,
    /// filled for the predictor-based methods, one entry per logged step
    pub diagnostics: Vec<PredictorDiagnostics>,
    pub state: SiameseState,
}

/// Independent random streams derived from one seed.
struct Streams {
    init: ChaCha8Rng,
    batch: ChaCha8Rng,
    augment: ChaCha8Rng,
    eval: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            init: stream(1),
            batch: stream(2),
            augment: stream(3),
            eval: stream(4),
        }
    }
}

/// The online network exactly as `train_run` initializes it for `seed`.
pub fn initial_params(seed: u64, input_dim: usize) -> Result<MlpParams> {
    MlpParams::random(&default_dims(input_dim), &mut Streams::new(seed).init)
}

/// Fixed evaluation material drawn once per run.
struct EvalSet {
    rows: Vec<usize>,
    x1: DenseMatrix,
    x2: DenseMatrix,
}

struct Evaluation<'a> {
    cfg: &'a TrainConfig,
    data: &'a SyntheticDataset,
    eval: &'a EvalSet,
    norm: NormMode,
}

impl Evaluation<'_> {
    fn row(
        &self,
        step: usize,
        state: &SiameseState,
        gs: GradState<'_>,
        lambda_diag: Option<f64>,
    ) -> Result<TrajectoryRow> {
        let norm = self.norm;
        let (all, _) = forward(&state.online, &self.data.points, norm)?;
        if !all.matrix().is_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        let knn_acc = knn_accuracy(&all, &self.data.labels, DEFAULT_KNN_K, self.cfg.seed)?;
        let pc90_rank = match principal_component_ratio(&all, DEFAULT_PC_THRESHOLD) {
            Ok(r) => r,
            // a constant representation is the fully collapsed case
            Err(Error::ZeroCovariance) => 1,
            Err(e) => return Err(e),
        };
        let sub = FeatureBatch::raw(DenseMatrix::from_fn(self.eval.rows.len(), all.c(), |i, k| {
            all.matrix()[(self.eval.rows[i], k)]
        }));
        let (neg_cos_mean, neg_abs_cos_mean) = negative_cosine(&sub)?;

        let (o1, _) = forward(&state.online, &self.eval.x1, norm)?;
        let (o2, _) = forward(&state.online, &self.eval.x2, norm)?;
        let pos_cos_mean = positive_cosine(&o1, &o2)?;
        let t2 = if state.target_kind.uses_ema() {
            forward(&state.target, &self.eval.x2, norm)?.0
        } else {
            o2
        };
        let bv = BatchViews::new(o1, t2, state.target_kind.view_kind())?;
        let loss = method_loss(self.cfg.method, &bv, &self.cfg.method_config, gs)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        Ok(TrajectoryRow {
            step,
            loss,
            pos_cos_mean,
            neg_cos_mean,
            neg_abs_cos_mean,
            knn_acc,
            pc90_rank,
            lambda_diag,
        })
    }
}

fn check_finite(step: usize, d: &GradientDecomposition) -> Result<()> {
    if d.total().is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            loss: f64::NAN,
        })
    }
}

/// Train one configuration on `data` and return its trajectory.
///
/// Per step: sample → augment → forward (online on both views, target per
/// `target_kind`) → refresh correlation/predictor → symmetric gradient →
/// backprop through the online branch only → SGD → EMA → enqueue bank keys.
pub fn train_run(cfg: &TrainConfig, data: &SyntheticDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m = data.len();
    if cfg.batch_n > m {
        return Err(Error::param("batch_n", "larger than the dataset"));
    }
    let method = cfg.method;
    let mc = &cfg.method_config;
    let norm = mc.norm_for(method);
    let aug = data.augment_params();
    let mut rng = Streams::new(cfg.seed);

    let online = MlpParams::random(&default_dims(data.dim()), &mut rng.init)?;
    let c = online.output_dim();
    let mut state = SiameseState::new(online, cfg.target_kind, cfg.momentum_init);
    let mut velocity = vec![0.0; state.online.num_params()];
    let mut corr = CorrelationState::new(c, mc.rho)?;
    let mut bank = if method.uses_bank() {
        Some(MemoryBank::random(mc.bank_size, c, &mut rng.init)?)
    } else {
        None
    };

    let eval_rows = index::sample(&mut rng.eval, m, cfg.eval_subsample.min(m)).into_vec();
    let (ex1, ex2) = augment_batch(&data.points, &eval_rows, aug, &mut rng.eval);
    let eval_set = EvalSet {
        rows: eval_rows,
        x1: ex1,
        x2: ex2,
    };
    let evaluation = Evaluation {
        cfg,
        data,
        eval: &eval_set,
        norm,
    };

    let config_json = serde_json::to_string(cfg)?;
    let mut log = TrajectoryLog::new(Some(config_json), Some(data.hash()));
    let mut diagnostics = Vec::new();
    let mixed = cfg.target_kind == TargetBranch::Mixed;
    let view_kind = cfg.target_kind.view_kind();
    let mut last_lambda: Option<f64> = None;
    let mut predictor: Option<PredictorMatrix> = None;

    for step in 0..cfg.steps {
        let rows = index::sample(&mut rng.batch, m, cfg.batch_n).into_vec();
        let (x1, x2) = augment_batch(&data.points, &rows, aug, &mut rng.augment);
        let (u1, cache1) = forward(&state.online, &x1, norm)?;
        let (u2, cache2) = forward(&state.online, &x2, norm)?;
        if !u1.matrix().is_finite() || !u2.matrix().is_finite() {
            return Err(Error::Diverged {
                step,
                loss: f64::NAN,
            });
        }
        // target outputs are never paired with a cache: no gradient can reach them
        let (t1, t2) = if cfg.target_kind.uses_ema() {
            (forward(&state.target, &x1, norm)?.0, forward(&state.target, &x2, norm)?.0)
        } else {
            (u1.clone(), u2.clone())
        };

        if method.uses_correlation() {
            corr.update(&u1, &u2)?;
        }
        if method.uses_predictor() {
            predictor = Some(compute_predictor(&corr, mc.epsilon_pred)?);
        }
        let gs = GradState {
            bank: bank.as_ref(),
            corr: method.uses_correlation().then_some(&corr),
            predictor: predictor.as_ref(),
        };

        let direction = |online: &FeatureBatch, target: &FeatureBatch, online_other: &FeatureBatch| {
            let bv = BatchViews::new(online.clone(), target.clone(), view_kind)?;
            let pos = unified_grad(method, &bv, mc, gs)?;
            if !mixed {
                return Ok::<_, Error>(pos);
            }
            let bv_neg = BatchViews::new(online.clone(), online_other.clone(), TargetKind::StopGradient)?;
            let neg = unified_grad(method, &bv_neg, mc, gs)?;
            GradientDecomposition::recombine(&pos, &neg)
        };
        let d1 = direction(&u1, &t2, &u2)?;
        let d2 = direction(&u2, &t1, &u1)?;
        check_finite(step, &d1)?;
        check_finite(step, &d2)?;
        if method.uses_predictor() {
            let lambdas: Vec<f64> = d1.balance().iter().chain(d2.balance()).copied().collect();
            last_lambda = Some(lambdas.iter().sum::<f64>() / lambdas.len() as f64);
            if step % cfg.log_every == 0 {
                let pred = predictor.as_ref().expect("predictor computed this step");
                diagnostics.push(PredictorDiagnostics::from_lambdas(step, &lambdas, &corr, pred));
            }
        }

        if step % cfg.log_every == 0 {
            log.push(evaluation.row(step, &state, gs, last_lambda)?)?;
        }

        // each direction carries half of the symmetric objective
        let mut grads = backward(&state.online, &cache1, &d1.total().scale(0.5))?;
        grads.add_assign(&backward(&state.online, &cache2, &d2.total().scale(0.5))?)?;
        if !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: f64::NAN,
            });
        }
        let (lr, mu, wd) = (cfg.lr, cfg.sgd_momentum, cfg.weight_decay);
        state.online.update_with(&grads, |i, p, g| {
            let v = mu * velocity[i] + g + wd * *p;
            velocity[i] = v;
            *p -= lr * v;
        })?;

        if cfg.target_kind.uses_ema() {
            ema_update(&mut state, step, cfg.steps, cfg.momentum_init, cfg.momentum_final)?;
        } else {
            state.sync_target();
        }
        if let Some(b) = bank.as_mut() {
            b.push_batch(&t1)?;
            b.push_batch(&t2)?;
        }
    }

    if log.last().is_none_or(|r| r.step < cfg.steps) {
        if method.uses_predictor() && predictor.is_none() {
            predictor = Some(compute_predictor(&corr, mc.epsilon_pred)?);
        }
        let gs = GradState {
            bank: bank.as_ref(),
            corr: (method.uses_correlation() && corr.is_initialized()).then_some(&corr),
            predictor: predictor.as_ref(),
        };
        let row = match evaluation.row(cfg.steps, &state, gs, last_lambda) {
            // stateful losses are undefined before the first update of their state
            Err(Error::Uninitialized) if cfg.steps == 0 => None,
            other => Some(other?),
        };
        if let Some(r) = row {
            log.push(r)?;
        }
    }
    Ok(TrainOutcome {
        log,
        diagnostics,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_data() -> SyntheticDataset {
        DatasetConfig {
            num_points: 256,
            dim: 8,
            ..DatasetConfig::default()
        }
        .generate(3)
        .unwrap()
    }

    fn small_cfg(method: Method, target: TargetBranch) -> TrainConfig {
        TrainConfig {
            steps: 6,
            // raw-feature VICReg chasing an EMA target blows up at the default rate
            lr: 0.005,
            batch_n: 16,
            log_every: 2,
            method,
            target_kind: target,
            eval_subsample: 64,
            method_config: MethodConfig {
                bank_size: 64,
                ..MethodConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn every_method_and_target_kind_runs() {
        let data = small_data();
        for method in Method::ALL {
            for target in TargetBranch::ALL {
                let out = train_run(&small_cfg(method, target), &data)
                    .unwrap_or_else(|e| panic!("{method}/{target}: {e}"));
                let steps: Vec<usize> = out.log.rows().iter().map(|r| r.step).collect();
                assert_eq!(steps, vec![0, 2, 4, 6], "{method}/{target}");
                for r in out.log.rows() {
                    assert!((1..=OUTPUT).contains(&r.pc90_rank));
                    assert!((-1.0..=1.0).contains(&r.pos_cos_mean));
                }
                assert_eq!(out.diagnostics.is_empty(), !method.uses_predictor());
            }
        }
    }

    const OUTPUT: usize = mlp::OUTPUT_DIM;

    #[test]
    fn zero_lr_freezes_parameters_and_rows() {
        let data = small_data();
        let mut cfg = small_cfg(Method::VicregSimplified, TargetBranch::StopGradient);
        cfg.lr = 0.0;
        let out = train_run(&cfg, &data).unwrap();
        let init = initial_params(cfg.seed, 8).unwrap();
        assert_eq!(out.state.online, init);
        let first = &out.log.rows()[0];
        for r in out.log.rows() {
            assert_eq!((r.loss, r.knn_acc, r.pc90_rank), (first.loss, first.knn_acc, first.pc90_rank));
            assert_eq!((r.pos_cos_mean, r.neg_abs_cos_mean), (first.pos_cos_mean, first.neg_abs_cos_mean));
        }
    }

    #[test]
    fn weight_sharing_equals_stop_gradient() {
        let data = small_data();
        for method in [Method::SimclrSimplified, Method::Unigrad, Method::VicregSimplified, Method::ByolDirectpredSimplified] {
            let mut a = small_cfg(method, TargetBranch::WeightSharing);
            let mut b = small_cfg(method, TargetBranch::StopGradient);
            a.steps = 1;
            b.steps = 1;
            let ra = train_run(&a, &data).unwrap();
            let rb = train_run(&b, &data).unwrap();
            assert_eq!(ra.state.online.flat(), rb.state.online.flat(), "{method}");
        }
    }

    #[test]
    fn non_ema_targets_track_online_weights() {
        let data = small_data();
        let out = train_run(&small_cfg(Method::Unigrad, TargetBranch::StopGradient), &data).unwrap();
        assert_eq!(out.state.target, out.state.online);
        let out = train_run(&small_cfg(Method::Unigrad, TargetBranch::Momentum), &data).unwrap();
        assert_ne!(out.state.target, out.state.online);
        assert_eq!(out.state.momentum_m, momentum_at(5, 6, 0.996, 1.0));
    }

    #[test]
    fn deterministic_logs() {
        let data = small_data();
        let cfg = small_cfg(Method::Moco, TargetBranch::Momentum);
        let a = train_run(&cfg, &data).unwrap().log.to_csv_string().unwrap();
        let b = train_run(&cfg, &data).unwrap().log.to_csv_string().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let data = small_data();
        let mut cfg = small_cfg(Method::Unigrad, TargetBranch::StopGradient);
        cfg.lr = 1e200;
        cfg.steps = 20;
        cfg.method_config.lambda_balance = Some(1e6);
        assert!(matches!(train_run(&cfg, &data), Err(Error::Diverged { .. })));
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"steps": 10, "method": "barlow_diag"}"#).unwrap();
        assert_eq!((cfg.steps, cfg.method), (10, Method::BarlowDiag));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 10}"#).is_err());
        assert!(TrainConfig { momentum_init: 1.0, momentum_final: 0.99, ..TrainConfig::default() }
            .validate()
            .is_err());
    }
}
