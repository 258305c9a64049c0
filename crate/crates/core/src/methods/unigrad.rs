//! UniGrad: `∂L/∂u₁ = (1/N)(−u₂ + λ F u₁)` with `F` the running correlation.

use super::{BatchViews, GradientDecomposition};
use crate::error::{Error, Result};
use crate::numerics::{dot, DenseMatrix};
use crate::predictor::CorrelationState;

pub const DEFAULT_LAMBDA: f64 = 100.0;

fn correlation<'a>(bv: &BatchViews, corr: &'a CorrelationState) -> Result<&'a DenseMatrix> {
    let f = corr.require_initialized()?;
    if f.rows() != bv.c() {
        return Err(Error::dim(format!(
            "correlation is {}x{}, features have dim {}",
            f.rows(),
            f.cols(),
            bv.c()
        )));
    }
    Ok(f)
}

/// `(1/N) Σ [−u₁·u₂ + (λ/2) u₁ᵀ F u₁]` with `F` frozen.
pub fn unigrad_directional_loss(
    online: &DenseMatrix,
    target: &DenseMatrix,
    f: &DenseMatrix,
    lambda: f64,
) -> Result<f64> {
    let n = online.rows();
    let fu = online.matmul(f)?;
    let mut total = 0.0;
    for i in 0..n {
        let u = online.row(i);
        total += -dot(u, target.row(i)) + 0.5 * lambda * dot(u, fu.row(i));
    }
    Ok(total / n as f64)
}

pub fn unigrad_loss(bv: &BatchViews, corr: &CorrelationState, lambda: f64) -> Result<f64> {
    let f = correlation(bv, corr)?;
    let a = unigrad_directional_loss(bv.u1.matrix(), bv.u2.matrix(), f, lambda)?;
    let b = unigrad_directional_loss(bv.u2.matrix(), bv.u1.matrix(), f, lambda)?;
    Ok(0.5 * (a + b))
}

pub fn unigrad_grad(
    bv: &BatchViews,
    corr: &CorrelationState,
    lambda: f64,
) -> Result<GradientDecomposition> {
    let f = correlation(bv, corr)?;
    let u1 = bv.u1.matrix();
    // F is symmetric, so row i of U₁F is F u₁ᵢ
    let g_neg = u1.matmul(f)?;
    let g_pos = bv.u2.matrix().scale(-1.0);
    GradientDecomposition::uniform(g_pos, g_neg, lambda, 1.0 / bv.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::methods::TargetKind;
    use crate::numerics::FeatureBatch;

    fn unit(rows: Vec<Vec<f64>>) -> FeatureBatch {
        FeatureBatch::l2_normalized(DenseMatrix::from_rows(&rows).unwrap())
    }

    #[test]
    fn self_correlation_examples() {
        let u = unit(vec![vec![1.0, -2.0, 2.0]]);
        let bv = BatchViews::new(u.clone(), u.clone(), TargetKind::Momentum).unwrap();
        let f = u.matrix().t_matmul(u.matrix()).unwrap();
        let corr = CorrelationState::from_matrix(f, 0.99).unwrap();
        let d = unigrad_grad(&bv, &corr, 7.0).unwrap();
        for (t, x) in d.total().row(0).iter().zip(u.row(0)) {
            assert!((t - 6.0 * x).abs() < 1e-14);
        }
        assert!(unigrad_loss(&bv, &corr, 2.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_is_pure_attraction() {
        let u1 = unit(vec![vec![1.0, 0.0], vec![0.3, 0.4]]);
        let u2 = unit(vec![vec![0.0, 1.0], vec![-1.0, 1.0]]);
        let bv = BatchViews::new(u1, u2.clone(), TargetKind::Momentum).unwrap();
        let corr = CorrelationState::from_matrix(DenseMatrix::identity(2), 0.99).unwrap();
        let d = unigrad_grad(&bv, &corr, 0.0).unwrap();
        assert_eq!(d.total(), &u2.matrix().scale(-0.5));

        let perp = BatchViews::new(
            unit(vec![vec![1.0, 0.0]]),
            unit(vec![vec![0.0, 1.0]]),
            TargetKind::Momentum,
        )
        .unwrap();
        assert_eq!(unigrad_loss(&perp, &corr, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn uninitialized_state_is_rejected() {
        let u = unit(vec![vec![1.0, 0.0]]);
        let bv = BatchViews::new(u.clone(), u, TargetKind::Momentum).unwrap();
        let corr = CorrelationState::new(2, 0.99).unwrap();
        assert!(matches!(unigrad_grad(&bv, &corr, 1.0), Err(Error::Uninitialized)));
        assert!(matches!(unigrad_loss(&bv, &corr, 1.0), Err(Error::Uninitialized)));
    }
}
