//! Moving-average feature correlation `F` and the closed-form linear predictor
//! `W_h = U (Λ_F^{1/2} + ε λ_max I) Uᵀ` built from its eigen-decomposition.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, sym_eig, DenseMatrix, EigenPair, FeatureBatch};

pub const DEFAULT_RHO: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 0.1;

/// Running estimate `F = Σ ρ_v v vᵀ` over all previously seen samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationState {
    f: DenseMatrix,
    rho: f64,
    initialized: bool,
    step: usize,
}

impl CorrelationState {
    pub fn new(c: usize, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::param("rho", format!("must lie in (0, 1), got {rho}")));
        }
        Ok(Self {
            f: DenseMatrix::zeros(c, c),
            rho,
            initialized: false,
            step: 0,
        })
    }

    /// An already-initialized state holding `f` (symmetrized).
    pub fn from_matrix(f: DenseMatrix, rho: f64) -> Result<Self> {
        let mut state = Self::new(f.rows(), rho)?;
        if f.rows() != f.cols() {
            return Err(Error::NotSquare {
                rows: f.rows(),
                cols: f.cols(),
            });
        }
        state.f = f.symmetrized();
        state.initialized = true;
        Ok(state)
    }

    pub fn f(&self) -> &DenseMatrix {
        &self.f
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn dim(&self) -> usize {
        self.f.rows()
    }

    pub(crate) fn require_initialized(&self) -> Result<&DenseMatrix> {
        if self.initialized {
            Ok(&self.f)
        } else {
            Err(Error::Uninitialized)
        }
    }

    /// Folds in `(U1ᵀU1 + U2ᵀU2) / 2N`. The first call replaces `F` outright;
    /// later calls blend with weight `rho` on the history.
    pub fn update(&mut self, batch1: &FeatureBatch, batch2: &FeatureBatch) -> Result<()> {
        let c = self.dim();
        if batch1.c() != c || batch2.c() != c || batch1.n() != batch2.n() {
            return Err(Error::dim(format!(
                "correlation update: state is {c}x{c}, batches are {}x{} and {}x{}",
                batch1.n(),
                batch1.c(),
                batch2.n(),
                batch2.c()
            )));
        }
        if batch1.n() == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        let tmp = batch_correlation(batch1, batch2)?;
        self.f = if self.initialized {
            self.f.scale(self.rho).axpy(1.0 - self.rho, &tmp)?.symmetrized()
        } else {
            tmp.symmetrized()
        };
        self.initialized = true;
        self.step += 1;
        Ok(())
    }
}

/// `(U1ᵀU1 + U2ᵀU2) / 2N`
pub fn batch_correlation(batch1: &FeatureBatch, batch2: &FeatureBatch) -> Result<DenseMatrix> {
    let n = batch1.n() as f64;
    let a = batch1.matrix().t_matmul(batch1.matrix())?;
    let b = batch2.matrix().t_matmul(batch2.matrix())?;
    Ok(a.add(&b)?.scale(1.0 / (2.0 * n)))
}

/// Which ε term sits in the balance-factor denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorForm {
    /// `F + ε² λ_max² I`: ε relative to the top eigenvalue
    #[default]
    RelativeEps,
    /// `F + ε² I`
    AbsoluteEps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorMatrix {
    pub wh: DenseMatrix,
    pub eig: EigenPair,
    /// `F^{1/2}` on the same eigenbasis (negative eigenvalues clamped to 0).
    pub f_sqrt: DenseMatrix,
    pub epsilon: f64,
    pub lambda_max: f64,
}

impl PredictorMatrix {
    pub fn dim(&self) -> usize {
        self.wh.rows()
    }

    /// Scalar added to `F` in the balance-factor denominator.
    pub fn denominator_shift(&self, form: DenominatorForm) -> f64 {
        match form {
            DenominatorForm::RelativeEps => (self.epsilon * self.lambda_max).powi(2),
            DenominatorForm::AbsoluteEps => self.epsilon * self.epsilon,
        }
    }
}

pub fn compute_predictor(state: &CorrelationState, epsilon: f64) -> Result<PredictorMatrix> {
    if !(epsilon >= 0.0) {
        return Err(Error::param("epsilon", format!("must be nonnegative, got {epsilon}")));
    }
    let f = state.require_initialized()?;
    let eig = sym_eig(f)?;
    let lambda_max = eig.max_eigenvalue().max(0.0);
    let roots: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let boosted: Vec<f64> = roots.iter().map(|r| r + epsilon * lambda_max).collect();
    let wh = eig.compose(&boosted);
    let f_sqrt = eig.compose(&roots);
    Ok(PredictorMatrix {
        wh,
        eig,
        f_sqrt,
        epsilon,
        lambda_max,
    })
}

/// `λ = u₁ᵀ W_hᵀ u₂ / u₁ᵀ (F + shift·I) u₁` for one sample.
pub fn balance_lambda(
    u1: &[f64],
    u2: &[f64],
    pred: &PredictorMatrix,
    state: &CorrelationState,
    form: DenominatorForm,
) -> Result<f64> {
    let f = state.require_initialized()?;
    let c = pred.dim();
    if u1.len() != c || u2.len() != c || f.rows() != c {
        return Err(Error::dim("balance_lambda: vector/predictor size mismatch"));
    }
    // W_h is symmetric so W_hᵀ u₂ = W_h u₂
    let wh_u2 = pred.wh.matvec(u2)?;
    let numerator = dot(u1, &wh_u2);
    let f_u1 = f.matvec(u1)?;
    let denominator = dot(u1, &f_u1) + pred.denominator_shift(form) * dot(u1, u1);
    if denominator.abs() < 1e-12 {
        return Err(Error::Degenerate(format!(
            "balance factor denominator {denominator:e}"
        )));
    }
    Ok(numerator / denominator)
}

/// One row of the per-step predictor trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorDiagnostics {
    pub step: usize,
    pub lambda_mean: f64,
    pub lambda_std: f64,
    pub trace_f: f64,
    pub top_eigenvalue: f64,
}

impl PredictorDiagnostics {
    pub fn from_lambdas(
        step: usize,
        lambdas: &[f64],
        state: &CorrelationState,
        pred: &PredictorMatrix,
    ) -> Self {
        let n = lambdas.len().max(1) as f64;
        let mean = lambdas.iter().sum::<f64>() / n;
        let var = lambdas.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        Self {
            step,
            lambda_mean: mean,
            lambda_std: var.sqrt(),
            trace_f: state.f().trace(),
            top_eigenvalue: pred.lambda_max,
        }
    }
}

pub const DIAGNOSTICS_HEADER: [&str; 5] =
    ["step", "lambda_mean", "lambda_std", "trace_f", "top_eigenvalue"];

pub fn write_diagnostics_csv<W: Write>(out: W, rows: &[PredictorDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DIAGNOSTICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.lambda_mean.to_string(),
            r.lambda_std.to_string(),
            r.trace_f.to_string(),
            r.top_eigenvalue.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
