//! Dense linear algebra, normalization utilities and the symmetric eigensolver.

mod eigen;
mod matrix;

pub use eigen::{sym_eig, EigenPair, CONVERGENCE_RTOL, MAX_SWEEPS, SYMMETRY_TOL};
pub use matrix::{dot, norm2, DenseMatrix};

use crate::error::{Error, Result};

/// Guard for every division by a norm or standard deviation.
pub const EPS_NORM: f64 = 1e-12;

const UNIT_NORM_TOL: f64 = 1e-9;

/// An `N × C` batch of representations, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    matrix: DenseMatrix,
    normalized: bool,
}

impl FeatureBatch {
    /// Wraps a matrix without touching it.
    pub fn raw(matrix: DenseMatrix) -> Self {
        Self {
            matrix,
            normalized: false,
        }
    }

    /// Row-wise ℓ₂ normalization. The `normalized` flag is set only if every row
    /// ends up unit-norm (an all-zero row stays zero).
    pub fn l2_normalized(matrix: DenseMatrix) -> Self {
        let mut matrix = matrix;
        let c = matrix.cols();
        let mut all_unit = c > 0;
        for i in 0..matrix.rows() {
            let row = matrix.row_mut(i);
            let scale = 1.0 / norm2(row).max(EPS_NORM);
            row.iter_mut().for_each(|x| *x *= scale);
            all_unit &= (norm2(row) - 1.0).abs() <= UNIT_NORM_TOL;
        }
        Self {
            matrix,
            normalized: all_unit,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(Self::raw(DenseMatrix::from_rows(rows)?))
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn c(&self) -> usize {
        self.matrix.cols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.matrix
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }
}

impl AsRef<DenseMatrix> for FeatureBatch {
    fn as_ref(&self) -> &DenseMatrix {
        &self.matrix
    }
}

/// `v / max(‖v‖₂, EPS_NORM)`
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::dim("cannot normalize an empty vector"));
    }
    let scale = 1.0 / norm2(v).max(EPS_NORM);
    Ok(v.iter().map(|x| x * scale).collect())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm2(a), norm2(b));
    if na <= EPS_NORM || nb <= EPS_NORM {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Temperature-scaled softmax, stabilized by subtracting the max score.
pub fn softmax_scaled(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", format!("must be positive, got {tau}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

fn column_means(m: &DenseMatrix) -> Vec<f64> {
    let n = m.rows() as f64;
    let mut means = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (acc, x) in means.iter_mut().zip(row) {
            *acc += x;
        }
    }
    means.iter_mut().for_each(|x| *x /= n);
    means
}

/// Standardizes each column to mean 0, population std 1 (`var + EPS_NORM²` guard).
pub fn batch_norm_cols(x: &FeatureBatch) -> Result<FeatureBatch> {
    let n = x.n();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let centered = decenter_cols(x)?.into_matrix();
    let mut var = vec![0.0; x.c()];
    for row in centered.row_iter() {
        for (acc, v) in var.iter_mut().zip(row) {
            *acc += v * v;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v / n as f64 + EPS_NORM * EPS_NORM).sqrt())
        .collect();
    let mut out = centered;
    for i in 0..n {
        for (v, s) in out.row_mut(i).iter_mut().zip(&inv_std) {
            *v *= s;
        }
    }
    Ok(FeatureBatch::raw(out))
}

/// Subtracts each column's mean; no rescaling.
pub fn decenter_cols(x: &FeatureBatch) -> Result<FeatureBatch> {
    if x.n() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let means = column_means(x.matrix());
    let mut out = x.matrix().clone();
    for i in 0..out.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    Ok(FeatureBatch::raw(out))
}

/// Unbiased (N − 1) standard deviation of each column.
pub fn col_std(x: &FeatureBatch) -> Result<Vec<f64>> {
    let n = x.n();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let centered = decenter_cols(x)?.into_matrix();
    let mut var = vec![0.0; x.c()];
    for row in centered.row_iter() {
        for (acc, v) in var.iter_mut().zip(row) {
            *acc += v * v;
        }
    }
    Ok(var.into_iter().map(|v| (v / (n - 1) as f64).sqrt()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, c: usize, seed: u64) -> FeatureBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureBatch::raw(DenseMatrix::from_fn(n, c, |_, _| rng.random_range(-2.0..2.0)))
    }

    #[test]
    fn normalize_examples() {
        let u = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(l2_normalize(&[]), Err(Error::Dimension(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = l2_normalize(&v).unwrap();
        assert!((u.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(cosine_sim(&[1.0], &[1.0, 0.0]), Err(Error::Dimension(_))));
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_scaled(&[0.0, 0.0, 0.0], 1.0).unwrap();
        assert!(u.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(softmax_scaled(&[1.0, 1.0], 0.5).unwrap(), vec![0.5, 0.5]);
        let p = softmax_scaled(&[2.0, 0.0], 1.0).unwrap();
        let e2 = 2.0_f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.880797).abs() < 1e-6);
        assert!((p[1] - 0.119203).abs() < 1e-6);
        assert!(softmax_scaled(&[1.0], 0.0).is_err());
        assert!(softmax_scaled(&[1.0], -1.0).is_err());
    }

    #[test]
    fn batch_norm_examples() {
        let x = FeatureBatch::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let y = batch_norm_cols(&x).unwrap();
        assert_eq!(y.matrix().col(0), vec![-1.0, 1.0]);
        assert_eq!(y.matrix().col(1), vec![0.0, 0.0]);
        assert!(batch_norm_cols(&FeatureBatch::from_rows(&[vec![1.0]]).unwrap()).is_err());

        let y = batch_norm_cols(&random_batch(8, 4, 11)).unwrap();
        for j in 0..4 {
            let col = y.matrix().col(j);
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decenter_examples() {
        let x = FeatureBatch::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(decenter_cols(&x).unwrap().matrix().col(0), vec![-1.0, 1.0]);
        let once = decenter_cols(&random_batch(8, 4, 5)).unwrap();
        let twice = decenter_cols(&once).unwrap();
        assert!(once.matrix().max_abs_diff(twice.matrix()) < 1e-12);
        for j in 0..4 {
            assert!(once.matrix().col(j).iter().sum::<f64>().abs() / 8.0 < 1e-12);
        }
    }

    #[test]
    fn col_std_examples() {
        let x = FeatureBatch::from_rows(&[vec![0.0, 7.0], vec![2.0, 7.0]]).unwrap();
        let s = col_std(&x).unwrap();
        assert!((s[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
        assert!(col_std(&FeatureBatch::from_rows(&[vec![1.0]]).unwrap()).is_err());

        // two-pass reference
        let x = random_batch(16, 3, 9);
        let s = col_std(&x).unwrap();
        for j in 0..3 {
            let col = x.matrix().col(j);
            let mean = col.iter().sum::<f64>() / 16.0;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            assert!((s[j] - (ss / 15.0).sqrt()).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            scores in prop::collection::vec(-20.0..20.0f64, 1..16),
            shift in -50.0..50.0f64,
            tau in 0.05..5.0f64,
        ) {
            let p = softmax_scaled(&scores, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let q = softmax_scaled(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn l2_normalize_is_idempotent(v in prop::collection::vec(-10.0..10.0f64, 1..32)) {
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn batch_norm_is_idempotent(seed in 0u64..1000, n in 2usize..12, c in 1usize..6) {
            let x = random_batch(n, c, seed);
            let once = batch_norm_cols(&x).unwrap();
            let twice = batch_norm_cols(&once).unwrap();
            prop_assert!(once.matrix().max_abs_diff(twice.matrix()) < 1e-9);
        }

        #[test]
        fn jacobi_reconstructs_psd(seed in 0u64..10_000, n in 1usize..12) {
            let a = random_batch(n + 2, n, seed).into_matrix();
            let s = a.t_matmul(&a).unwrap();
            let e = sym_eig(&s).unwrap();
            prop_assert!(e.reconstruct().sub(&s).unwrap().frobenius_norm() < 1e-8);
            let u = &e.eigenvectors;
            let utu = u.t_matmul(u).unwrap();
            prop_assert!(utu.sub(&DenseMatrix::identity(n)).unwrap().frobenius_norm() < 1e-8);
            prop_assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
