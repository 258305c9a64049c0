//! Losses and analytic gradients for every method family, each expressed as a
//! [`GradientDecomposition`]: a positive term, a negative term and a balance factor.
//!
//! Gradients are with respect to the (already normalized) representations `u`,
//! for the direction in which `u1` is the online view and `u2` the target.
//! Training applies each formula to both view orders and averages.

mod asymmetric;
mod bank;
mod contrastive;
mod decomposition;
mod decorrelation;
mod unigrad;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use asymmetric::{
    asymmetric_directional_loss, asymmetric_grad, asymmetric_loss, asymmetric_loss_with,
    AsymmetricVariant,
};
pub use bank::MemoryBank;
pub use contrastive::{
    contrastive_grad, infonce_directional, infonce_loss, simclr_batch_loss, simclr_target_term,
    ContrastiveVariant, Negatives,
};
pub use decomposition::GradientDecomposition;
pub use decorrelation::{
    barlow_grad, barlow_loss, cross_correlation, vicreg_directional_loss, vicreg_full_terms,
    vicreg_grad, vicreg_loss, BarlowVariant, NormMode, VicregFullTerms, VicregVariant,
    VicregWeights,
};
pub use unigrad::{unigrad_directional_loss, unigrad_grad, unigrad_loss};

use crate::error::{Error, Result};
use crate::numerics::FeatureBatch;
use crate::predictor::{CorrelationState, DenominatorForm, PredictorMatrix, DEFAULT_EPSILON, DEFAULT_RHO};

/// How the target branch relates to the online branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    WeightSharing,
    StopGradient,
    Momentum,
}

/// Online (`u1`) and target (`u2`) representations of the same `N` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchViews {
    pub u1: FeatureBatch,
    pub u2: FeatureBatch,
    pub target_kind: TargetKind,
}

impl BatchViews {
    pub fn new(u1: FeatureBatch, u2: FeatureBatch, target_kind: TargetKind) -> Result<Self> {
        if u1.n() != u2.n() || u1.c() != u2.c() {
            return Err(Error::dim(format!(
                "views are {}x{} and {}x{}",
                u1.n(),
                u1.c(),
                u2.n(),
                u2.c()
            )));
        }
        if u1.n() == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        Ok(Self {
            u1,
            u2,
            target_kind,
        })
    }

    pub fn n(&self) -> usize {
        self.u1.n()
    }

    pub fn c(&self) -> usize {
        self.u1.c()
    }

    pub fn swapped(&self) -> Self {
        Self {
            u1: self.u2.clone(),
            u2: self.u1.clone(),
            target_kind: self.target_kind,
        }
    }
}

/// Every gradient variant, addressed by a stable string identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Moco,
    SimclrFull,
    SimclrSimplified,
    ByolDirectpredFull,
    ByolDirectpredSimplified,
    BarlowFull,
    BarlowDiag,
    VicregFull,
    VicregSimplified,
    Unigrad,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Moco,
        Method::SimclrFull,
        Method::SimclrSimplified,
        Method::ByolDirectpredFull,
        Method::ByolDirectpredSimplified,
        Method::BarlowFull,
        Method::BarlowDiag,
        Method::VicregFull,
        Method::VicregSimplified,
        Method::Unigrad,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Moco => "moco",
            Method::SimclrFull => "simclr_full",
            Method::SimclrSimplified => "simclr_simplified",
            Method::ByolDirectpredFull => "byol_directpred_full",
            Method::ByolDirectpredSimplified => "byol_directpred_simplified",
            Method::BarlowFull => "barlow_full",
            Method::BarlowDiag => "barlow_diag",
            Method::VicregFull => "vicreg_full",
            Method::VicregSimplified => "vicreg_simplified",
            Method::Unigrad => "unigrad",
        }
    }

    pub fn uses_bank(self) -> bool {
        self == Method::Moco
    }

    pub fn uses_correlation(self) -> bool {
        matches!(
            self,
            Method::ByolDirectpredFull | Method::ByolDirectpredSimplified | Method::Unigrad
        )
    }

    pub fn uses_predictor(self) -> bool {
        matches!(self, Method::ByolDirectpredFull | Method::ByolDirectpredSimplified)
    }

    /// The exact SimCLR gradient already contains the target-branch term.
    pub fn includes_target_gradient(self) -> bool {
        self == Method::SimclrFull
    }

    pub fn default_norm_mode(self) -> NormMode {
        match self {
            Method::VicregFull => NormMode::None,
            _ => NormMode::L2,
        }
    }

    /// Balance factor used when the config leaves it unset.
    pub fn default_balance(self, norm: NormMode) -> f64 {
        match self {
            Method::Moco | Method::SimclrFull | Method::SimclrSimplified => 1.0,
            Method::ByolDirectpredFull | Method::ByolDirectpredSimplified | Method::Unigrad => {
                unigrad::DEFAULT_LAMBDA
            }
            Method::BarlowFull | Method::BarlowDiag => match norm {
                NormMode::BatchNorm => 5e-3,
                _ => 50.0,
            },
            Method::VicregSimplified => 25.0,
            // derived from lambda1 inside the gradient; reported for reference only
            Method::VicregFull => 4e-5,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::UnknownIdentifier(s.to_string()))
    }
}

/// Hyperparameters shared by all methods. Unset optional fields fall back to
/// the per-method defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub tau: f64,
    pub lambda_balance: Option<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub epsilon_pred: f64,
    pub rho: f64,
    pub barlow_diag_scale: f64,
    pub norm_mode: Option<NormMode>,
    pub bank_size: usize,
    pub directpred_denominator: DenominatorForm,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            lambda_balance: None,
            lambda1: 0.04,
            lambda2: 1.0,
            gamma: 1.0,
            epsilon_pred: DEFAULT_EPSILON,
            rho: DEFAULT_RHO,
            barlow_diag_scale: 0.1,
            norm_mode: None,
            bank_size: 4096,
            directpred_denominator: DenominatorForm::RelativeEps,
        }
    }
}

impl MethodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::param("tau", "must be positive"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::param("rho", "must lie in (0, 1)"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::param("gamma", "must be positive"));
        }
        if self.lambda_balance.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::param("lambda_balance", "must be nonnegative"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::param("lambda1/lambda2", "must be nonnegative"));
        }
        if !(self.epsilon_pred >= 0.0) {
            return Err(Error::param("epsilon_pred", "must be nonnegative"));
        }
        if self.bank_size == 0 {
            return Err(Error::param("bank_size", "must be positive"));
        }
        Ok(())
    }

    pub fn norm_for(&self, method: Method) -> NormMode {
        self.norm_mode.unwrap_or(method.default_norm_mode())
    }

    pub fn balance_for(&self, method: Method) -> f64 {
        self.lambda_balance
            .unwrap_or_else(|| method.default_balance(self.norm_for(method)))
    }

    pub fn vicreg_weights(&self) -> VicregWeights {
        VicregWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            gamma: self.gamma,
        }
    }
}

/// Mutable training state a method may read: memory bank, correlation, predictor.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradState<'a> {
    pub bank: Option<&'a MemoryBank>,
    pub corr: Option<&'a CorrelationState>,
    pub predictor: Option<&'a PredictorMatrix>,
}

impl<'a> GradState<'a> {
    fn bank(&self) -> Result<&'a MemoryBank> {
        self.bank.ok_or(Error::EmptyNegativeSet)
    }

    fn corr(&self) -> Result<&'a CorrelationState> {
        self.corr.ok_or(Error::Uninitialized)
    }

    fn predictor(&self) -> Result<&'a PredictorMatrix> {
        self.predictor.ok_or(Error::Uninitialized)
    }
}

/// Single entry point: dispatches `method` to its gradient routine.
pub fn unified_grad(
    method: Method,
    bv: &BatchViews,
    cfg: &MethodConfig,
    state: GradState<'_>,
) -> Result<GradientDecomposition> {
    let balance = cfg.balance_for(method);
    let norm = cfg.norm_for(method);
    match method {
        Method::Moco => contrastive_grad(bv, ContrastiveVariant::Moco(state.bank()?), cfg.tau),
        Method::SimclrFull => contrastive_grad(bv, ContrastiveVariant::SimclrFull, cfg.tau),
        Method::SimclrSimplified => {
            contrastive_grad(bv, ContrastiveVariant::SimclrSimplified, cfg.tau)
        }
        Method::ByolDirectpredFull | Method::ByolDirectpredSimplified => {
            let variant = if method == Method::ByolDirectpredFull {
                AsymmetricVariant::Full
            } else {
                AsymmetricVariant::Simplified
            };
            asymmetric_grad(
                bv,
                state.corr()?,
                state.predictor()?,
                variant,
                cfg.directpred_denominator,
            )
        }
        Method::BarlowFull => barlow_grad(bv, balance, BarlowVariant::Full, norm),
        Method::BarlowDiag => barlow_grad(
            bv,
            balance,
            BarlowVariant::DiagSubstituted(cfg.barlow_diag_scale),
            norm,
        ),
        Method::VicregFull => vicreg_grad(bv, VicregVariant::Full(cfg.vicreg_weights())),
        Method::VicregSimplified => vicreg_grad(bv, VicregVariant::Simplified { balance }),
        Method::Unigrad => unigrad_grad(bv, state.corr()?, balance),
    }
}

/// The symmetrized objective whose gradient each method approximates.
pub fn method_loss(
    method: Method,
    bv: &BatchViews,
    cfg: &MethodConfig,
    state: GradState<'_>,
) -> Result<f64> {
    match method {
        Method::Moco => infonce_loss(bv, Negatives::Bank(state.bank()?), cfg.tau),
        Method::SimclrFull | Method::SimclrSimplified => {
            infonce_loss(bv, Negatives::BatchMinusSelf, cfg.tau)
        }
        Method::ByolDirectpredFull | Method::ByolDirectpredSimplified => {
            asymmetric_loss(bv, state.predictor()?)
        }
        Method::BarlowFull | Method::BarlowDiag => {
            barlow_loss(bv, cfg.balance_for(method), cfg.norm_for(method))
        }
        Method::VicregFull | Method::VicregSimplified => vicreg_loss(bv, cfg.vicreg_weights()),
        Method::Unigrad => unigrad_loss(bv, state.corr()?, cfg.balance_for(method)),
    }
}
