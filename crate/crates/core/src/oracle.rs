//! Central-difference gradients and analytic-vs-numeric comparison reports.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, DenseMatrix, FeatureBatch};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_REL_FLOOR: f64 = 1e-8;

/// `(f(x + h e) − f(x − h e)) / 2h` for every coordinate of `x`.
///
/// Probe points are passed as raw (unnormalized) batches: the losses are
/// differentiated as functions of free variables.
pub fn numeric_grad<F>(loss_fn: F, x: &FeatureBatch, h: f64) -> Result<DenseMatrix>
where
    F: Fn(&FeatureBatch) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::param("h", "must be positive"));
    }
    let (n, c) = (x.n(), x.c());
    let mut grad = DenseMatrix::zeros(n, c);
    let mut probe = x.matrix().clone();
    for i in 0..n {
        for k in 0..c {
            let idx = i * c + k;
            let orig = probe.as_slice()[idx];
            probe.as_mut_slice()[idx] = orig + h;
            let plus = loss_fn(&FeatureBatch::raw(probe.clone()))?;
            probe.as_mut_slice()[idx] = orig - h;
            let minus = loss_fn(&FeatureBatch::raw(probe.clone()))?;
            probe.as_mut_slice()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            grad.as_mut_slice()[idx] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// mean over rows of cos(analytic row, numeric row); rows where both vanish count as 1
    pub mean_cosine: f64,
    pub worst_index: (usize, usize),
    pub h: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Elementwise comparison with relative denominator `max(|a|, |n|, rel_floor)`.
pub fn grad_check(analytic: &DenseMatrix, numeric: &DenseMatrix, rel_floor: f64) -> Result<GradCheckReport> {
    grad_check_with_h(analytic, numeric, rel_floor, DEFAULT_H)
}

pub fn grad_check_with_h(
    analytic: &DenseMatrix,
    numeric: &DenseMatrix,
    rel_floor: f64,
    h: f64,
) -> Result<GradCheckReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::dim(format!(
            "analytic {:?} vs numeric {:?}",
            analytic.shape(),
            numeric.shape()
        )));
    }
    let (n, c) = analytic.shape();
    let mut max_abs_err = 0.0;
    let mut max_rel_err = 0.0;
    let mut worst_index = (0, 0);
    for i in 0..n {
        for k in 0..c {
            let (a, b) = (analytic[(i, k)], numeric[(i, k)]);
            let abs = (a - b).abs();
            let rel = abs / a.abs().max(b.abs()).max(rel_floor);
            if abs > max_abs_err {
                max_abs_err = abs;
            }
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_index = (i, k);
            }
        }
    }
    let mut cos_sum = 0.0;
    for i in 0..n {
        let (a, b) = (analytic.row(i), numeric.row(i));
        let (na, nb) = (norm2(a), norm2(b));
        cos_sum += if na == 0.0 && nb == 0.0 {
            1.0
        } else if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
        };
    }
    Ok(GradCheckReport {
        max_abs_err,
        max_rel_err,
        mean_cosine: if n == 0 { 1.0 } else { cos_sum / n as f64 },
        worst_index,
        h,
    })
}
