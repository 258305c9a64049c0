//! Cyclic Jacobi eigensolver for dense symmetric matrices.

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Sweep cap; exceeding it is reported as non-convergence.
pub const MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius norm, relative to ‖S‖_F, at which iteration stops.
pub const CONVERGENCE_RTOL: f64 = 1e-12;
/// Largest tolerated |S_ij − S_ji| (scaled by max(1, max|S_ij|)).
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Orthonormal eigenvectors (as columns) with eigenvalues in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub eigenvectors: DenseMatrix,
    pub eigenvalues: Vec<f64>,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// `U · diag(values) · Uᵀ` for arbitrary replacement eigenvalues.
    pub fn compose(&self, values: &[f64]) -> DenseMatrix {
        let u = &self.eigenvectors;
        let n = self.dim();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for (k, &lam) in values.iter().enumerate() {
                    acc += u[(i, k)] * lam * u[(j, k)];
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.compose(&self.eigenvalues)
    }
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Eigen-decomposes a symmetric matrix with cyclic Jacobi rotations.
///
/// Eigenvalues come back sorted descending; each eigenvector is sign-fixed so
/// that its first entry with magnitude above 1e-12 is positive.
pub fn sym_eig(s: &DenseMatrix) -> Result<EigenPair> {
    let (rows, cols) = s.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    let scale = s.as_slice().iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let asym = s.max_asymmetry();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let n = rows;
    let mut a = s.symmetrized();
    let mut v = DenseMatrix::identity(n);
    let threshold = CONVERGENCE_RTOL * a.frobenius_norm();

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a);
        if off <= threshold {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::EigenNoConvergence { sweeps, off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;

                a[(p, p)] -= t * apq;
                a[(q, q)] += t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    let new_kp = c * akp - sn * akq;
                    let new_kq = sn * akp + c * akq;
                    a[(k, p)] = new_kp;
                    a[(p, k)] = new_kp;
                    a[(k, q)] = new_kq;
                    a[(q, k)] = new_kq;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));

    let eigenvalues = order.iter().map(|&k| a[(k, k)]).collect();
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let sign = (0..n)
            .map(|i| v[(i, src)])
            .find(|x| x.abs() > 1e-12)
            .map_or(1.0, f64::signum);
        for i in 0..n {
            eigenvectors[(i, dst)] = sign * v[(i, src)];
        }
    }
    Ok(EigenPair {
        eigenvectors,
        eigenvalues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_input() {
        let e = sym_eig(&DenseMatrix::from_diag(&[1.0, 4.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![4.0, 1.0]);
        assert_eq!(e.eigenvectors.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let e = sym_eig(&DenseMatrix::identity(8)).unwrap();
        assert!(e.eigenvalues.iter().all(|&l| l == 1.0));
        assert_eq!(e.eigenvectors, DenseMatrix::identity(8));
    }

    #[test]
    fn two_by_two_closed_form() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1 with vectors (1,1)/√2 and (1,-1)/√2.
        let s = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = sym_eig(&s).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.eigenvectors[(0, 0)] - r).abs() < 1e-14);
        assert!((e.eigenvectors[(1, 0)] - r).abs() < 1e-14);
        assert!((e.eigenvectors[(0, 1)] - r).abs() < 1e-14);
        assert!((e.eigenvectors[(1, 1)] + r).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(matches!(
            sym_eig(&DenseMatrix::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
        let s = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&s), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn zero_matrix_is_trivially_converged() {
        let e = sym_eig(&DenseMatrix::zeros(3, 3)).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0; 3]);
    }
}
