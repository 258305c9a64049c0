//! Predictor-based (BYOL / SimSiam) objective with the closed-form predictor.

use super::{BatchViews, GradientDecomposition};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, DenseMatrix, EPS_NORM};
use crate::predictor::{balance_lambda, CorrelationState, DenominatorForm, PredictorMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsymmetricVariant {
    /// exact gradient, keeping the `2ελ_max F^{1/2} u` and `ε²λ_max² u` terms
    Full,
    /// `−W_hᵀu₂ + λ F u₁` with the dynamic balance factor
    Simplified,
}

fn check_predictor(bv: &BatchViews, wh: &DenseMatrix) -> Result<()> {
    let c = bv.c();
    if wh.shape() != (c, c) {
        return Err(Error::dim(format!(
            "predictor is {:?}, features have dim {c}",
            wh.shape()
        )));
    }
    Ok(())
}

/// `(1/N) Σ −(W_h u₁)·u₂ / ‖W_h u₁‖` for one direction.
pub fn asymmetric_directional_loss(
    online: &DenseMatrix,
    target: &DenseMatrix,
    wh: &DenseMatrix,
) -> Result<f64> {
    let n = online.rows();
    let mut total = 0.0;
    for i in 0..n {
        let y = wh.matvec(online.row(i))?;
        let ny = norm2(&y);
        if ny < EPS_NORM {
            return Err(Error::Degenerate("‖W_h u₁‖ is numerically zero".into()));
        }
        total -= dot(&y, target.row(i)) / ny;
    }
    Ok(total / n as f64)
}

/// Symmetrized negative cosine between the predicted online view and the target.
pub fn asymmetric_loss(bv: &BatchViews, wh: &PredictorMatrix) -> Result<f64> {
    asymmetric_loss_with(bv, &wh.wh)
}

pub fn asymmetric_loss_with(bv: &BatchViews, wh: &DenseMatrix) -> Result<f64> {
    check_predictor(bv, wh)?;
    let a = asymmetric_directional_loss(bv.u1.matrix(), bv.u2.matrix(), wh)?;
    let b = asymmetric_directional_loss(bv.u2.matrix(), bv.u1.matrix(), wh)?;
    Ok(0.5 * (a + b))
}

pub fn asymmetric_grad(
    bv: &BatchViews,
    corr: &CorrelationState,
    pred: &PredictorMatrix,
    variant: AsymmetricVariant,
    form: DenominatorForm,
) -> Result<GradientDecomposition> {
    let f = corr.require_initialized()?;
    check_predictor(bv, &pred.wh)?;
    if f.rows() != bv.c() {
        return Err(Error::dim("correlation state dim differs from feature dim"));
    }
    let (u1, u2) = (bv.u1.matrix(), bv.u2.matrix());
    let (n, c) = u1.shape();
    let wh_t = pred.wh.transpose();
    let boost = 2.0 * pred.epsilon * pred.lambda_max;
    let shift = (pred.epsilon * pred.lambda_max).powi(2);

    let mut g_pos = DenseMatrix::zeros(n, c);
    let mut g_neg = DenseMatrix::zeros(n, c);
    let mut balance = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    for i in 0..n {
        let u = u1.row(i);
        let y = pred.wh.matvec(u)?;
        let ny = norm2(&y);
        if ny < EPS_NORM {
            return Err(Error::Degenerate("‖W_h u₁‖ below the normalization guard".into()));
        }
        scale.push(1.0 / (ny * n as f64));

        let wt_u2 = wh_t.matvec(u2.row(i))?;
        for (g, w) in g_pos.row_mut(i).iter_mut().zip(&wt_u2) {
            *g = -w;
        }

        let f_u = f.matvec(u)?;
        match variant {
            AsymmetricVariant::Simplified => {
                g_neg.row_mut(i).copy_from_slice(&f_u);
                balance.push(balance_lambda(u, u2.row(i), pred, corr, form)?);
            }
            AsymmetricVariant::Full => {
                let fs_u = pred.f_sqrt.matvec(u)?;
                let neg = g_neg.row_mut(i);
                for k in 0..c {
                    neg[k] = f_u[k] + boost * fs_u[k] + shift * u[k];
                }
                let denominator = dot(u, neg);
                if denominator.abs() < 1e-12 {
                    return Err(Error::Degenerate(format!(
                        "balance factor denominator {denominator:e}"
                    )));
                }
                balance.push(dot(u, &wt_u2) / denominator);
            }
        }
    }
    GradientDecomposition::new(g_pos, g_neg, balance, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::methods::TargetKind;
    use crate::numerics::FeatureBatch;
    use crate::predictor::compute_predictor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rows: Vec<Vec<f64>>) -> FeatureBatch {
        FeatureBatch::l2_normalized(DenseMatrix::from_rows(&rows).unwrap())
    }

    #[test]
    fn loss_examples() {
        let u = unit(vec![vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let bv = BatchViews::new(u.clone(), u.clone(), TargetKind::StopGradient).unwrap();
        let i2 = DenseMatrix::identity(2);
        assert!((asymmetric_loss_with(&bv, &i2).unwrap() + 1.0).abs() < 1e-15);

        let perp = unit(vec![vec![-2.0, 1.0], vec![0.5, 1.0]]);
        let bv = BatchViews::new(u.clone(), perp, TargetKind::StopGradient).unwrap();
        assert!(asymmetric_loss_with(&bv, &i2).unwrap().abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = DenseMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)).symmetrized();
        let bv = BatchViews::new(u, unit(vec![vec![0.3, 0.1], vec![0.2, -0.9]]), TargetKind::Momentum)
            .unwrap();
        let a = asymmetric_loss_with(&bv, &w).unwrap();
        let b = asymmetric_loss_with(&bv, &w.scale(2.0)).unwrap();
        assert!((a - b).abs() < 1e-12);

        assert!(asymmetric_loss_with(&bv, &DenseMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn fixed_point_at_identity_correlation() {
        let u = unit(vec![vec![1.0, 2.0, 0.0], vec![0.0, -1.0, 1.0]]);
        let bv = BatchViews::new(u.clone(), u, TargetKind::StopGradient).unwrap();
        let corr = CorrelationState::from_matrix(DenseMatrix::identity(3), 0.9).unwrap();
        let pred = compute_predictor(&corr, 0.0).unwrap();
        let d = asymmetric_grad(&bv, &corr, &pred, AsymmetricVariant::Simplified, DenominatorForm::RelativeEps)
            .unwrap();
        assert!(d.balance().iter().all(|l| (l - 1.0).abs() < 1e-15));
        assert!(d.total().as_slice().iter().all(|x| x.abs() < 1e-15));
    }
}
