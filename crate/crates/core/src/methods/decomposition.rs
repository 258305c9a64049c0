use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// A per-sample gradient split as `scale · (g_pos + balance · g_neg)`.
///
/// `balance` and `scale` are stored per row: most methods use one constant for
/// the whole batch, but the predictor-based gradient has a per-sample balance
/// factor and a per-sample `1/‖W_h u‖` prefactor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDecomposition {
    g_pos: DenseMatrix,
    g_neg: DenseMatrix,
    balance: Vec<f64>,
    scale: Vec<f64>,
    total: DenseMatrix,
}

impl GradientDecomposition {
    pub fn new(
        g_pos: DenseMatrix,
        g_neg: DenseMatrix,
        balance: Vec<f64>,
        scale: Vec<f64>,
    ) -> Result<Self> {
        let n = g_pos.rows();
        if g_pos.shape() != g_neg.shape() || balance.len() != n || scale.len() != n {
            return Err(Error::dim(format!(
                "decomposition parts: g_pos {:?}, g_neg {:?}, {} balances, {} scales",
                g_pos.shape(),
                g_neg.shape(),
                balance.len(),
                scale.len()
            )));
        }
        let mut total = DenseMatrix::zeros(n, g_pos.cols());
        for i in 0..n {
            let (b, s) = (balance[i], scale[i]);
            for ((t, p), q) in total.row_mut(i).iter_mut().zip(g_pos.row(i)).zip(g_neg.row(i)) {
                *t = s * (p + b * q);
            }
        }
        Ok(Self {
            g_pos,
            g_neg,
            balance,
            scale,
            total,
        })
    }

    pub fn uniform(g_pos: DenseMatrix, g_neg: DenseMatrix, balance: f64, scale: f64) -> Result<Self> {
        let n = g_pos.rows();
        Self::new(g_pos, g_neg, vec![balance; n], vec![scale; n])
    }

    /// Positive part from `pos`, negative part from `neg`; balance and scale follow `pos`.
    pub fn recombine(pos: &Self, neg: &Self) -> Result<Self> {
        Self::new(
            pos.g_pos.clone(),
            neg.g_neg.clone(),
            pos.balance.clone(),
            pos.scale.clone(),
        )
    }

    pub fn g_pos(&self) -> &DenseMatrix {
        &self.g_pos
    }

    pub fn g_neg(&self) -> &DenseMatrix {
        &self.g_neg
    }

    pub fn balance(&self) -> &[f64] {
        &self.balance
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn total(&self) -> &DenseMatrix {
        &self.total
    }

    pub fn into_total(self) -> DenseMatrix {
        self.total
    }

    pub fn rows(&self) -> usize {
        self.total.rows()
    }

    pub fn mean_balance(&self) -> f64 {
        self.balance.iter().sum::<f64>() / self.balance.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_follows_contract() {
        let p = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let q = DenseMatrix::from_rows(&[vec![-1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let d = GradientDecomposition::new(p, q, vec![2.0, 3.0], vec![0.5, 1.0]).unwrap();
        assert_eq!(d.total().as_slice(), &[-0.5, 1.5, 3.0, 7.0]);
    }

    #[test]
    fn rejects_mismatched_parts() {
        let p = DenseMatrix::zeros(2, 2);
        assert!(GradientDecomposition::new(p.clone(), DenseMatrix::zeros(2, 3), vec![1.0; 2], vec![1.0; 2]).is_err());
        assert!(GradientDecomposition::new(p.clone(), p, vec![1.0; 1], vec![1.0; 2]).is_err());
    }
}
