//! Gaussian-cluster toy data and the noise/dropout view augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, DenseMatrix};

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Dataset shape and augmentation strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_clusters: usize,
    pub dim: usize,
    pub num_points: usize,
    /// minimum pairwise distance between cluster centers
    pub separation: f64,
    /// per-coordinate standard deviation of each cluster
    pub cluster_std: f64,
    /// augmentation noise
    pub noise_sigma: f64,
    pub p_drop: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_clusters: 4,
            dim: 32,
            num_points: 2048,
            separation: 6.0,
            cluster_std: 1.0,
            noise_sigma: 0.3,
            p_drop: 0.1,
        }
    }
}

impl DatasetConfig {
    pub fn generate(&self, seed: u64) -> Result<SyntheticDataset> {
        let mut ds = generate_clusters(
            self.num_clusters,
            self.dim,
            self.num_points,
            self.separation,
            self.cluster_std,
            seed,
        )?;
        ds.noise_sigma = self.noise_sigma;
        ds.p_drop = self.p_drop;
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::param("augmentation", "need noise_sigma ≥ 0 and p_drop in [0, 1]"));
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub points: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_clusters: usize,
    pub noise_sigma: f64,
    pub p_drop: f64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn augment_params(&self) -> AugmentParams {
        AugmentParams {
            noise_sigma: self.noise_sigma,
            p_drop: self.p_drop,
        }
    }

    /// SHA-256 over shape, point bits and labels, lowercase hex.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for v in self.points.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Balanced labels, unit-variance clusters.
pub fn generate_dataset(k: usize, d: usize, m: usize, separation: f64, seed: u64) -> Result<SyntheticDataset> {
    let cfg = DatasetConfig {
        num_clusters: k,
        dim: d,
        num_points: m,
        separation,
        ..DatasetConfig::default()
    };
    cfg.generate(seed)
}

fn random_orthonormal(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm2(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn place_centers(k: usize, d: usize, separation: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if k <= d {
        // orthogonal directions at radius s/√2: every pair exactly s apart
        let r = separation / 2f64.sqrt();
        return Ok(random_orthonormal(k, d, rng)
            .into_iter()
            .map(|b| b.into_iter().map(|x| x * r).collect())
            .collect());
    }
    // more clusters than dimensions: rejection-sample points on a sphere of radius s
    let infeasible = Error::InfeasibleSeparation { k, d, separation };
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while centers.len() < k {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(infeasible);
        }
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm2(&v).max(1e-12);
        let c: Vec<f64> = v.iter().map(|x| x / n * separation).collect();
        if centers
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= separation)
        {
            centers.push(c);
        }
    }
    Ok(centers)
}

fn generate_clusters(
    k: usize,
    d: usize,
    m: usize,
    separation: f64,
    cluster_std: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if k < 2 || d < 2 {
        return Err(Error::param("k/d", "need at least two clusters and two dimensions"));
    }
    if m < k {
        return Err(Error::param("m", "need at least one point per cluster"));
    }
    if !(separation > 0.0 && separation.is_finite()) || !(cluster_std >= 0.0) {
        return Err(Error::param("separation", "must be positive and finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = place_centers(k, d, separation, &mut rng)?;
    let noise = Normal::new(0.0, cluster_std).map_err(|e| Error::param("cluster_std", e.to_string()))?;
    let labels: Vec<usize> = (0..m).map(|i| i % k).collect();
    let points = DenseMatrix::from_fn(m, d, |i, j| centers[labels[i]][j] + noise.sample(&mut rng));
    Ok(SyntheticDataset {
        points,
        labels,
        num_clusters: k,
        noise_sigma: DatasetConfig::default().noise_sigma,
        p_drop: DatasetConfig::default().p_drop,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub noise_sigma: f64,
    pub p_drop: f64,
}

fn one_view<R: Rng + ?Sized>(x: &[f64], p: AugmentParams, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let noisy = if p.noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                v + p.noise_sigma * z
            } else {
                v
            };
            if p.p_drop > 0.0 && rng.random::<f64>() < p.p_drop {
                0.0
            } else {
                noisy
            }
        })
        .collect()
}

/// Two independent noisy, coordinate-dropped copies of `x`.
pub fn augment<R: Rng + ?Sized>(x: &[f64], params: AugmentParams, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let a = one_view(x, params, rng);
    let b = one_view(x, params, rng);
    (a, b)
}

/// Augment the listed rows of `points` into two `|rows| × D` view batches.
pub fn augment_batch<R: Rng + ?Sized>(
    points: &DenseMatrix,
    rows: &[usize],
    params: AugmentParams,
    rng: &mut R,
) -> (DenseMatrix, DenseMatrix) {
    let d = points.cols();
    let mut v1 = Vec::with_capacity(rows.len() * d);
    let mut v2 = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        let (a, b) = augment(points.row(r), params, rng);
        v1.extend(a);
        v2.extend(b);
    }
    (
        DenseMatrix::from_vec(rows.len(), d, v1).expect("finite augmented views"),
        DenseMatrix::from_vec(rows.len(), d, v2).expect("finite augmented views"),
    )
}
