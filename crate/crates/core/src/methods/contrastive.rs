//! InfoNCE and the MoCo / SimCLR gradient forms.
//!
//! All similarities are dot products: inputs are taken to be the ℓ₂-normalized
//! representations, and gradients are with respect to those representations.

use super::{BatchViews, GradientDecomposition, MemoryBank};
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_scaled, DenseMatrix};

/// Where the softmax denominator draws its non-positive candidates from.
#[derive(Debug, Clone, Copy)]
pub enum Negatives<'a> {
    /// every representation in both views except the anchor itself
    BatchMinusSelf,
    Bank(&'a MemoryBank),
}

#[derive(Debug, Clone, Copy)]
pub enum ContrastiveVariant<'a> {
    Moco(&'a MemoryBank),
    SimclrFull,
    SimclrSimplified,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::param("tau", format!("must be positive, got {tau}")))
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `[anchors; partners]` stacked, `2N × C`.
fn stack(anchors: &DenseMatrix, partners: &DenseMatrix) -> DenseMatrix {
    let mut data = anchors.as_slice().to_vec();
    data.extend_from_slice(partners.as_slice());
    DenseMatrix::from_vec(anchors.rows() * 2, anchors.cols(), data).expect("finite stack")
}

/// Mean over anchors `u1_i` of `−log softmax` of the positive `u2_i`.
pub fn infonce_directional(
    anchors: &DenseMatrix,
    positives: &DenseMatrix,
    negatives: Negatives<'_>,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    if anchors.shape() != positives.shape() {
        return Err(Error::dim("anchor and positive batches differ in shape"));
    }
    let n = anchors.rows();
    if n == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    match negatives {
        Negatives::Bank(bank) => {
            if bank.is_empty() {
                return Err(Error::EmptyNegativeSet);
            }
            if bank.dim() != anchors.cols() {
                return Err(Error::dim("bank dim differs from feature dim"));
            }
            for i in 0..n {
                let a = anchors.row(i);
                let pos = dot(a, positives.row(i)) / tau;
                let logits = std::iter::once(pos).chain(bank.iter().map(|v| dot(a, v) / tau));
                total += log_sum_exp(logits) - pos;
            }
        }
        Negatives::BatchMinusSelf => {
            let z = stack(anchors, positives);
            if z.rows() < 2 {
                return Err(Error::EmptyNegativeSet);
            }
            for i in 0..n {
                let a = anchors.row(i);
                let pos = dot(a, positives.row(i)) / tau;
                let logits = (0..z.rows()).filter(|&k| k != i).map(|k| dot(a, z.row(k)) / tau);
                total += log_sum_exp(logits) - pos;
            }
        }
    }
    Ok(total / n as f64)
}

/// Symmetrized InfoNCE: the average of both anchor directions.
pub fn infonce_loss(bv: &BatchViews, negatives: Negatives<'_>, tau: f64) -> Result<f64> {
    let a = infonce_directional(bv.u1.matrix(), bv.u2.matrix(), negatives, tau)?;
    let b = infonce_directional(bv.u2.matrix(), bv.u1.matrix(), negatives, tau)?;
    Ok(0.5 * (a + b))
}

/// SimCLR batch objective `(1/N) Σ_x l(x)` over all `2N` anchors, with the
/// target branch carrying gradient. Its derivative in `u1` is the full form.
pub fn simclr_batch_loss(u1: &DenseMatrix, u2: &DenseMatrix, tau: f64) -> Result<f64> {
    Ok(infonce_directional(u1, u2, Negatives::BatchMinusSelf, tau)?
        + infonce_directional(u2, u1, Negatives::BatchMinusSelf, tau)?)
}

/// Row `x` holds the softmax of `z_x · z_y / τ` over `y ≠ x`; the diagonal is 0.
fn batch_softmax_rows(z: &DenseMatrix, tau: f64) -> Result<DenseMatrix> {
    let m = z.rows();
    let mut p = DenseMatrix::zeros(m, m);
    for x in 0..m {
        let others: Vec<usize> = (0..m).filter(|&y| y != x).collect();
        let scores: Vec<f64> = others.iter().map(|&y| dot(z.row(x), z.row(y))).collect();
        let probs = softmax_scaled(&scores, tau)?;
        for (&y, &pr) in others.iter().zip(&probs) {
            p[(x, y)] = pr;
        }
    }
    Ok(p)
}

/// `Σ_v w_v v` for a weight row over the rows of `z`.
fn weighted_rows(weights: impl Iterator<Item = (usize, f64)>, z: &DenseMatrix) -> Vec<f64> {
    let mut acc = vec![0.0; z.cols()];
    for (k, w) in weights {
        for (a, v) in acc.iter_mut().zip(z.row(k)) {
            *a += w * v;
        }
    }
    acc
}

/// Gradient through the target branch of SimCLR, `(1/τN)(−u2 + Σ_v t_v v)`.
/// Vanishes when the target branch is detached.
pub fn simclr_target_term(bv: &BatchViews, tau: f64) -> Result<DenseMatrix> {
    check_tau(tau)?;
    let (u1, u2) = (bv.u1.matrix(), bv.u2.matrix());
    let n = u1.rows();
    let z = stack(u1, u2);
    let p = batch_softmax_rows(&z, tau)?;
    let mut out = DenseMatrix::zeros(n, u1.cols());
    let scale = 1.0 / (tau * n as f64);
    for i in 0..n {
        let t = weighted_rows((0..z.rows()).filter(|&x| x != i).map(|x| (x, p[(x, i)])), &z);
        for ((o, ti), pos) in out.row_mut(i).iter_mut().zip(&t).zip(u2.row(i)) {
            *o = scale * (ti - pos);
        }
    }
    Ok(out)
}

pub fn contrastive_grad(
    bv: &BatchViews,
    variant: ContrastiveVariant<'_>,
    tau: f64,
) -> Result<GradientDecomposition> {
    check_tau(tau)?;
    let (u1, u2) = (bv.u1.matrix(), bv.u2.matrix());
    let (n, c) = u1.shape();
    let scale = 1.0 / (tau * n as f64);
    let g_pos_single = u2.scale(-1.0);

    match variant {
        ContrastiveVariant::Moco(bank) => {
            if bank.is_empty() {
                return Err(Error::EmptyNegativeSet);
            }
            if bank.dim() != c {
                return Err(Error::dim("bank dim differs from feature dim"));
            }
            let keys = bank.to_matrix();
            let mut g_neg = DenseMatrix::zeros(n, c);
            for i in 0..n {
                let a = u1.row(i);
                let scores: Vec<f64> = std::iter::once(dot(a, u2.row(i)))
                    .chain(keys.row_iter().map(|k| dot(a, k)))
                    .collect();
                let s = softmax_scaled(&scores, tau)?;
                let row = g_neg.row_mut(i);
                for (r, p) in row.iter_mut().zip(u2.row(i)) {
                    *r = s[0] * p;
                }
                for (k, key) in keys.row_iter().enumerate() {
                    for (r, v) in row.iter_mut().zip(key) {
                        *r += s[k + 1] * v;
                    }
                }
            }
            GradientDecomposition::uniform(g_pos_single, g_neg, 1.0, scale)
        }
        ContrastiveVariant::SimclrSimplified | ContrastiveVariant::SimclrFull => {
            let z = stack(u1, u2);
            let p = batch_softmax_rows(&z, tau)?;
            let full = matches!(variant, ContrastiveVariant::SimclrFull);
            let mut g_neg = DenseMatrix::zeros(n, c);
            for i in 0..n {
                let mut s = weighted_rows((0..z.rows()).map(|y| (y, p[(i, y)])), &z);
                if full {
                    let t = weighted_rows(
                        (0..z.rows()).filter(|&x| x != i).map(|x| (x, p[(x, i)])),
                        &z,
                    );
                    s.iter_mut().zip(&t).for_each(|(a, b)| *a += b);
                }
                g_neg.row_mut(i).copy_from_slice(&s);
            }
            let g_pos = if full { u2.scale(-2.0) } else { g_pos_single };
            GradientDecomposition::uniform(g_pos, g_neg, 1.0, scale)
        }
    }
}
