use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, DenseMatrix, FeatureBatch};

/// FIFO queue of past target-branch representations used as negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::param("capacity", "memory bank needs capacity and dim > 0"));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    /// A full bank of random unit vectors.
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let mut bank = Self::new(capacity, dim)?;
        for _ in 0..capacity {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            bank.push(&v)?;
        }
        Ok(bank)
    }

    /// Enqueues `v` after ℓ₂ normalization, evicting the oldest entry when full.
    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::dim(format!(
                "bank entries have dim {}, got {}",
                self.dim,
                v.len()
            )));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(l2_normalize(v)?);
        Ok(())
    }

    pub fn push_batch(&mut self, batch: &FeatureBatch) -> Result<()> {
        for i in 0..batch.n() {
            self.push(batch.row(i))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + Clone {
        self.entries.iter().map(Vec::as_slice)
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        let data = self.entries.iter().flatten().copied().collect();
        DenseMatrix::from_vec(self.len(), self.dim, data).expect("bank entries are finite")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fifo_eviction_and_unit_entries() {
        let mut bank = MemoryBank::new(2, 2).unwrap();
        bank.push(&[3.0, 4.0]).unwrap();
        bank.push(&[0.0, 2.0]).unwrap();
        bank.push(&[5.0, 0.0]).unwrap();
        assert_eq!(bank.len(), 2);
        let rows: Vec<_> = bank.iter().map(<[f64]>::to_vec).collect();
        assert_eq!(rows, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(bank.push(&[1.0]).is_err());
    }

    #[test]
    fn random_bank_is_full_and_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = MemoryBank::random(16, 5, &mut rng).unwrap();
        assert_eq!(bank.len(), 16);
        assert!(bank.iter().all(|v| (norm2(v) - 1.0).abs() < 1e-9));
    }
}
