//! Barlow Twins and VICReg objectives and their gradient forms.

use serde::{Deserialize, Serialize};

use super::{BatchViews, GradientDecomposition};
use crate::error::{Error, Result};
use crate::numerics::{batch_norm_cols, col_std, decenter_cols, DenseMatrix, FeatureBatch, EPS_NORM};

/// Normalization applied to representations before the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    L2,
    BatchNorm,
    None,
}

impl NormMode {
    pub fn apply(self, x: &FeatureBatch) -> Result<FeatureBatch> {
        match self {
            NormMode::L2 => Ok(FeatureBatch::l2_normalized(x.matrix().clone())),
            NormMode::BatchNorm => batch_norm_cols(x),
            NormMode::None => Ok(x.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BarlowVariant {
    /// `−A u₂` with `A = I − (1 − λ) W_diag`
    Full,
    /// `A` replaced by `c·I`
    DiagSubstituted(f64),
}

fn normalized_pair(bv: &BatchViews, norm: NormMode) -> Result<(FeatureBatch, FeatureBatch)> {
    if norm == NormMode::BatchNorm && bv.n() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: bv.n(),
        });
    }
    Ok((norm.apply(&bv.u1)?, norm.apply(&bv.u2)?))
}

/// `W = (1/N) Σ v₁ v₂ᵀ`
pub fn cross_correlation(v1: &DenseMatrix, v2: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(v1.t_matmul(v2)?.scale(1.0 / v1.rows() as f64))
}

/// `Σ (W_ii − 1)² + λ Σ_{i≠j} W_ij²`; symmetric in the two views.
pub fn barlow_loss(bv: &BatchViews, lambda: f64, norm: NormMode) -> Result<f64> {
    let (v1, v2) = normalized_pair(bv, norm)?;
    let w = cross_correlation(v1.matrix(), v2.matrix())?;
    let c = w.rows();
    let mut on = 0.0;
    let mut off = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j {
                on += (w[(i, i)] - 1.0).powi(2);
            } else {
                off += w[(i, j)].powi(2);
            }
        }
    }
    Ok(on + lambda * off)
}

pub fn barlow_grad(
    bv: &BatchViews,
    lambda: f64,
    variant: BarlowVariant,
    norm: NormMode,
) -> Result<GradientDecomposition> {
    let (v1, v2) = normalized_pair(bv, norm)?;
    let (v1, v2) = (v1.matrix(), v2.matrix());
    let n = v1.rows();
    let g_pos = match variant {
        BarlowVariant::Full => {
            let w = cross_correlation(v1, v2)?;
            let a: Vec<f64> = w.diag().iter().map(|d| 1.0 - (1.0 - lambda) * d).collect();
            DenseMatrix::from_fn(n, v2.cols(), |i, k| -a[k] * v2[(i, k)])
        }
        BarlowVariant::DiagSubstituted(c) => v2.scale(-c),
    };
    // row i: Σ_n (u₂ᵢ·v₂ₙ / N) v₁ₙ
    let coeff = v2.matmul_t(v2)?.scale(1.0 / n as f64);
    let g_neg = coeff.matmul(v1)?;
    GradientDecomposition::uniform(g_pos, g_neg, lambda, 2.0 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicregWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
}

/// Invariance + off-diagonal covariance + std hinge, for the online view `v1`.
pub fn vicreg_directional_loss(v1: &DenseMatrix, v2: &DenseMatrix, w: VicregWeights) -> Result<f64> {
    let (n, c) = v1.shape();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if v2.shape() != (n, c) {
        return Err(Error::dim("views differ in shape"));
    }
    let invariance = v1.sub(v2)?.as_slice().iter().map(|x| x * x).sum::<f64>() / n as f64;
    let batch = FeatureBatch::raw(v1.clone());
    let centered = decenter_cols(&batch)?.into_matrix();
    let cov = centered.t_matmul(&centered)?.scale(1.0 / (n - 1) as f64);
    let mut off = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                off += cov[(i, j)].powi(2);
            }
        }
    }
    let hinge: f64 = col_std(&batch)?.iter().map(|s| (w.gamma - s).max(0.0)).sum();
    Ok(invariance + w.lambda1 / c as f64 * off + w.lambda2 / c as f64 * hinge)
}

/// Average of both directions, so swapping the views leaves it unchanged.
pub fn vicreg_loss(bv: &BatchViews, w: VicregWeights) -> Result<f64> {
    let a = vicreg_directional_loss(bv.u1.matrix(), bv.u2.matrix(), w)?;
    let b = vicreg_directional_loss(bv.u2.matrix(), bv.u1.matrix(), w)?;
    Ok(0.5 * (a + b))
}

/// The two pieces of the exact VICReg negative gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct VicregFullTerms {
    /// row i: `Σ_v (ũᵢ·ṽ / N) ṽ` over the de-centered online batch
    pub decorrelation: DenseMatrix,
    /// row i: `(1/λ) uᵢ − B ũᵢ`
    pub residual: DenseMatrix,
    /// `λ = 2λ₁N² / (C(N−1)²)`
    pub balance: f64,
    /// per-channel (N − 1) standard deviation of the online view
    pub std: Vec<f64>,
}

pub fn vicreg_full_terms(bv: &BatchViews, w: VicregWeights) -> Result<VicregFullTerms> {
    let (n, c) = (bv.n(), bv.c());
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if !(w.lambda1 > 0.0) {
        return Err(Error::param(
            "lambda1",
            "exact VICReg gradient needs lambda1 > 0 (balance factor divides by it)",
        ));
    }
    let (nf, cf) = (n as f64, c as f64);
    let centered = decenter_cols(&bv.u1)?.into_matrix();
    let cov = centered.t_matmul(&centered)?.scale(1.0 / (nf - 1.0));
    let std = col_std(&bv.u1)?;
    let balance = 2.0 * w.lambda1 * nf * nf / (cf * (nf - 1.0).powi(2));

    let decorrelation = centered.matmul_t(&centered)?.scale(1.0 / nf).matmul(&centered)?;

    let b_prefactor = nf / (balance * cf * (nf - 1.0));
    let b_diag: Vec<f64> = (0..c)
        .map(|k| {
            let active = if w.gamma - std[k] > 0.0 { 1.0 } else { 0.0 };
            b_prefactor * (2.0 * w.lambda1 * cov[(k, k)] + 0.5 * w.lambda2 * active / std[k].max(EPS_NORM))
        })
        .collect();
    let u1 = bv.u1.matrix();
    let residual =
        DenseMatrix::from_fn(n, c, |i, k| u1[(i, k)] / balance - b_diag[k] * centered[(i, k)]);
    Ok(VicregFullTerms {
        decorrelation,
        residual,
        balance,
        std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VicregVariant {
    Full(VicregWeights),
    /// `−u₂ + λ Σ (u₁·v₁ / N) v₁` with a fixed balance factor
    Simplified { balance: f64 },
}

pub fn vicreg_grad(bv: &BatchViews, variant: VicregVariant) -> Result<GradientDecomposition> {
    let n = bv.n();
    let scale = 2.0 / n as f64;
    let g_pos = bv.u2.matrix().scale(-1.0);
    match variant {
        VicregVariant::Full(w) => {
            let terms = vicreg_full_terms(bv, w)?;
            let g_neg = terms.decorrelation.add(&terms.residual)?;
            GradientDecomposition::uniform(g_pos, g_neg, terms.balance, scale)
        }
        VicregVariant::Simplified { balance } => {
            let u1 = bv.u1.matrix();
            let g_neg = u1.matmul_t(u1)?.scale(1.0 / n as f64).matmul(u1)?;
            GradientDecomposition::uniform(g_pos, g_neg, balance, scale)
        }
    }
}
