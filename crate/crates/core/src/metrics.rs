//! Trajectory quantities: view agreement, pairwise similarity, k-NN accuracy
//! and effective rank, plus the per-run CSV log.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{decenter_cols, dot, sym_eig, DenseMatrix, FeatureBatch, EPS_NORM};

pub const DEFAULT_KNN_K: usize = 5;
pub const DEFAULT_PC_THRESHOLD: f64 = 0.9;
/// Fraction of samples used as the k-NN reference set.
pub const KNN_TRAIN_FRACTION: f64 = 0.8;

fn unit_rows(x: &FeatureBatch) -> DenseMatrix {
    if x.is_normalized() {
        return x.matrix().clone();
    }
    FeatureBatch::l2_normalized(x.matrix().clone()).into_matrix()
}

/// Mean over rows of `cos(u1ᵢ, u2ᵢ)`.
pub fn positive_cosine(u1: &FeatureBatch, u2: &FeatureBatch) -> Result<f64> {
    if u1.n() != u2.n() || u1.c() != u2.c() {
        return Err(Error::dim("positive_cosine needs matching shapes"));
    }
    if u1.n() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let (a, b) = (unit_rows(u1), unit_rows(u2));
    let total: f64 = (0..a.rows())
        .map(|i| dot(a.row(i), b.row(i)).clamp(-1.0, 1.0))
        .sum();
    Ok(total / a.rows() as f64)
}

/// `(mean, mean_abs)` of `cos(uᵢ, uⱼ)` over ordered pairs `i ≠ j`.
pub fn negative_cosine(u: &FeatureBatch) -> Result<(f64, f64)> {
    let n = u.n();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let a = unit_rows(u);
    let gram = a.matmul_t(&a)?;
    let (mut sum, mut sum_abs) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let c = gram[(i, j)].clamp(-1.0, 1.0);
                sum += c;
                sum_abs += c.abs();
            }
        }
    }
    let pairs = (n * (n - 1)) as f64;
    Ok((sum / pairs, sum_abs / pairs))
}

/// Deterministic 80/20 split: `(train, test)` index lists, each sorted.
pub fn knn_split(m: usize, split_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_train = ((m as f64) * KNN_TRAIN_FRACTION).round() as usize;
    let n_train = n_train.clamp(m.min(1), m.saturating_sub(1).max(m.min(1)));
    let (mut train, mut test) = (idx[..n_train].to_vec(), idx[n_train..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Cosine k-NN vote of the held-out 20% against the 80% reference set.
///
/// Neighbors are ranked by similarity, ties going to the smaller sample index;
/// a tied vote goes to the label of the highest-ranked neighbor among the tied labels.
pub fn knn_accuracy(features: &FeatureBatch, labels: &[usize], k: usize, split_seed: u64) -> Result<f64> {
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    let m = features.n();
    if labels.len() != m {
        return Err(Error::dim(format!("{m} samples but {} labels", labels.len())));
    }
    let (train, test) = knn_split(m, split_seed);
    if train.len() < k || test.is_empty() {
        return Err(Error::InsufficientSamples {
            needed: k + 1,
            got: m,
        });
    }
    let x = unit_rows(features);
    let num_labels = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut correct = 0usize;
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    let mut votes = vec![0usize; num_labels];
    for &t in &test {
        ranked.clear();
        ranked.extend(train.iter().map(|&r| (dot(x.row(t), x.row(r)), r)));
        ranked.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top = &mut ranked[..k];
        top.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        votes.iter_mut().for_each(|v| *v = 0);
        for &(_, r) in top.iter() {
            votes[labels[r]] += 1;
        }
        let best = *votes.iter().max().expect("at least one label");
        let predicted = top
            .iter()
            .map(|&(_, r)| labels[r])
            .find(|&l| votes[l] == best)
            .expect("a top neighbor carries the winning label");
        if predicted == labels[t] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Smallest `r` whose leading `r` covariance eigenvalues exceed `threshold` of
/// the total. Shares equal to the threshold up to round-off (1e-12) count as exceeding it.
pub fn principal_component_ratio(features: &FeatureBatch, threshold: f64) -> Result<usize> {
    let n = features.n();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param("threshold", "must lie in (0, 1)"));
    }
    let centered = decenter_cols(features)?.into_matrix();
    let cov = centered.t_matmul(&centered)?.scale(1.0 / (n - 1) as f64);
    let eig = sym_eig(&cov.symmetrized())?;
    let values: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if !(total > EPS_NORM * EPS_NORM) {
        return Err(Error::ZeroCovariance);
    }
    let mut cum = 0.0;
    for (r, v) in values.iter().enumerate() {
        cum += v;
        if cum / total > threshold - 1e-12 {
            return Ok(r + 1);
        }
    }
    Ok(values.len())
}

/// One logged point of a training trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub loss: f64,
    pub pos_cos_mean: f64,
    pub neg_cos_mean: f64,
    pub neg_abs_cos_mean: f64,
    pub knn_acc: f64,
    pub pc90_rank: usize,
    pub lambda_diag: Option<f64>,
}

pub const TRAJECTORY_COLUMNS: [&str; 8] = [
    "step",
    "loss",
    "pos_cos_mean",
    "neg_cos_mean",
    "neg_abs_cos_mean",
    "knn_acc",
    "pc90_rank",
    "lambda_diag",
];

impl TrajectoryRow {
    /// Numeric value of a column by name; `None` for an empty optional field.
    pub fn column(&self, name: &str) -> Result<Option<f64>> {
        Ok(match name {
            "step" => Some(self.step as f64),
            "loss" => Some(self.loss),
            "pos_cos_mean" => Some(self.pos_cos_mean),
            "neg_cos_mean" => Some(self.neg_cos_mean),
            "neg_abs_cos_mean" => Some(self.neg_abs_cos_mean),
            "knn_acc" => Some(self.knn_acc),
            "pc90_rank" => Some(self.pc90_rank as f64),
            "lambda_diag" => self.lambda_diag,
            other => return Err(Error::UnknownIdentifier(other.to_string())),
        })
    }
}

/// Rows of one run, plus the provenance lines written as `#` comments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub config: Option<String>,
    pub dataset_hash: Option<String>,
    rows: Vec<TrajectoryRow>,
}

impl TrajectoryLog {
    pub fn new(config: Option<String>, dataset_hash: Option<String>) -> Self {
        Self {
            config,
            dataset_hash,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: TrajectoryRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::param("step", "trajectory steps must strictly increase"));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[TrajectoryRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&TrajectoryRow> {
        self.rows.last()
    }

    pub fn series(&self, column: &str) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            if let Some(v) = r.column(column)? {
                out.push((r.step as f64, v));
            }
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        if let Some(c) = &self.config {
            writeln!(out, "# config: {c}")?;
        }
        if let Some(h) = &self.dataset_hash {
            writeln!(out, "# dataset_hash: {h}")?;
        }
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(TRAJECTORY_COLUMNS)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read_csv<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let mut log = TrajectoryLog::default();
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            if let Some(c) = line.strip_prefix("# config: ") {
                log.config = Some(c.to_string());
            } else if let Some(h) = line.strip_prefix("# dataset_hash: ") {
                log.dataset_hash = Some(h.to_string());
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = reader.headers()?.clone();
        if header.iter().ne(TRAJECTORY_COLUMNS.iter().copied()) {
            return Err(Error::Config(format!("unexpected trajectory header {header:?}")));
        }
        for row in reader.deserialize() {
            log.push(row?)?;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(n: usize, c: usize, seed: u64) -> FeatureBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureBatch::raw(DenseMatrix::from_fn(n, c, |_, _| rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn positive_cosine_examples() {
        let u = FeatureBatch::l2_normalized(random_batch(6, 4, 1).into_matrix());
        assert!((positive_cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let neg = FeatureBatch::l2_normalized(u.matrix().scale(-1.0));
        assert!((positive_cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
        let v = FeatureBatch::l2_normalized(random_batch(6, 4, 2).into_matrix());
        let direct: f64 = (0..6).map(|i| dot(u.row(i), v.row(i))).sum::<f64>() / 6.0;
        assert!((positive_cosine(&u, &v).unwrap() - direct).abs() < 1e-14);
        assert!(positive_cosine(&u, &random_batch(5, 4, 3)).is_err());
    }

    #[test]
    fn negative_cosine_examples() {
        let eye = FeatureBatch::l2_normalized(DenseMatrix::identity(4));
        assert_eq!(negative_cosine(&eye).unwrap(), (0.0, 0.0));
        let same = FeatureBatch::from_rows(&vec![vec![0.6, 0.8]; 5]).unwrap();
        let (m, a) = negative_cosine(&same).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && (a - 1.0).abs() < 1e-12);
        assert!(negative_cosine(&FeatureBatch::from_rows(&[vec![1.0]]).unwrap()).is_err());

        let x = random_batch(9, 5, 4);
        let mut s = 0.0;
        let mut sa = 0.0;
        for i in 0..9 {
            for j in 0..9 {
                if i != j {
                    let c = crate::numerics::cosine_sim(x.row(i), x.row(j)).unwrap();
                    s += c;
                    sa += c.abs();
                }
            }
        }
        let (m, a) = negative_cosine(&x).unwrap();
        assert!((m - s / 72.0).abs() < 1e-13 && (a - sa / 72.0).abs() < 1e-13);
    }

    #[test]
    fn knn_examples() {
        // one-hot cluster features
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..4).map(|k| if k == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let x = FeatureBatch::from_rows(&rows).unwrap();
        assert_eq!(knn_accuracy(&x, &labels, 1, 0).unwrap(), 1.0);
        assert!(knn_accuracy(&x, &labels, 0, 0).is_err());

        // random labels on random features sit at chance
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 4000;
        let x = random_batch(m, 8, 10);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..2)).collect();
        let acc = knn_accuracy(&x, &labels, 5, 1).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = knn_split(100, 7);
        assert_eq!((a.len(), b.len()), (80, 20));
        assert_eq!(knn_split(100, 7), (a.clone(), b.clone()));
        assert!(a.iter().all(|i| !b.contains(i)));
    }

    #[test]
    fn pc_ratio_examples() {
        let collinear =
            FeatureBatch::raw(DenseMatrix::from_fn(10, 6, |i, k| (i as f64 - 3.0) * (k as f64 + 1.0)));
        assert_eq!(principal_component_ratio(&collinear, 0.9).unwrap(), 1);

        // ±e_k rows: covariance exactly proportional to the identity
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                (0..10).map(|k| if k == i / 2 { s } else { 0.0 }).collect()
            })
            .collect();
        let iso = FeatureBatch::from_rows(&rows).unwrap();
        assert_eq!(principal_component_ratio(&iso, 0.9).unwrap(), 9);

        let zero = FeatureBatch::from_rows(&vec![vec![1.0, 2.0]; 4]).unwrap();
        assert!(matches!(principal_component_ratio(&zero, 0.9), Err(Error::ZeroCovariance)));
    }

    #[test]
    fn pc_ratio_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scales = [5.0, 3.0, 2.0, 1.0, 0.5, 0.2];
        let x = FeatureBatch::raw(DenseMatrix::from_fn(200, 6, |_, k| {
            scales[k] * rng.random_range(-1.0..1.0)
        }));
        // nalgebra as an independent eigen-solver
        let centered = decenter_cols(&x).unwrap().into_matrix();
        let cov = centered.t_matmul(&centered).unwrap().scale(1.0 / 199.0);
        let na = nalgebra::DMatrix::from_row_slice(6, 6, cov.as_slice());
        let mut ev: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = ev.iter().sum();
        for thr in [0.5, 0.8, 0.9, 0.99] {
            let mut cum = 0.0;
            let expected = ev
                .iter()
                .position(|v| {
                    cum += v;
                    cum / total > thr
                })
                .unwrap()
                + 1;
            assert_eq!(principal_component_ratio(&x, thr).unwrap(), expected);
        }
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let mut log = TrajectoryLog::new(Some("{\"a\":1}".into()), Some("abc".into()));
        log.push(TrajectoryRow {
            step: 0,
            loss: 1.5,
            pos_cos_mean: 0.1,
            neg_cos_mean: -0.01,
            neg_abs_cos_mean: 0.2,
            knn_acc: 0.5,
            pc90_rank: 7,
            lambda_diag: None,
        })
        .unwrap();
        let mut second = log.rows()[0].clone();
        second.step = 10;
        second.lambda_diag = Some(2.5);
        log.push(second.clone()).unwrap();
        assert!(log.push(second).is_err());

        let text = log.to_csv_string().unwrap();
        assert!(text.starts_with("# config: {\"a\":1}\n# dataset_hash: abc\nstep,loss,"));
        let back = TrajectoryLog::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.series("lambda_diag").unwrap(), vec![(10.0, 2.5)]);
        assert!(back.series("bogus").is_err());
    }

    fn random_orthogonal(c: usize, seed: u64) -> DenseMatrix {
        let a = random_batch(c, c, seed).into_matrix();
        let sym = a.add(&a.transpose()).unwrap();
        sym_eig(&sym).unwrap().eigenvectors
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pc_ratio_rotation_invariant(seed in 0u64..1000) {
            let x = random_batch(30, 5, seed).into_matrix();
            let aniso = DenseMatrix::from_fn(30, 5, |i, k| x[(i, k)] * (k as f64 + 1.0));
            let q = random_orthogonal(5, seed + 1);
            let rotated = aniso.matmul(&q).unwrap();
            prop_assert_eq!(
                principal_component_ratio(&FeatureBatch::raw(aniso), 0.9).unwrap(),
                principal_component_ratio(&FeatureBatch::raw(rotated), 0.9).unwrap()
            );
        }

        #[test]
        fn knn_scale_invariant(seed in 0u64..1000, s in 0.01f64..100.0) {
            let x = random_batch(40, 4, seed);
            let labels: Vec<usize> = (0..40).map(|i| (i * 7 + seed as usize) % 3).collect();
            let scaled = FeatureBatch::raw(x.matrix().scale(s));
            prop_assert_eq!(
                knn_accuracy(&x, &labels, 3, seed).unwrap(),
                knn_accuracy(&scaled, &labels, 3, seed).unwrap()
            );
        }

        #[test]
        fn mean_abs_one_iff_parallel(seed in 0u64..1000) {
            let v: Vec<f64> = random_batch(1, 4, seed).row(0).to_vec();
            let signs = [1.0, -2.0, 0.5, 3.0];
            let rows: Vec<Vec<f64>> = signs.iter().map(|s| v.iter().map(|x| x * s).collect()).collect();
            let (_, a) = negative_cosine(&FeatureBatch::from_rows(&rows).unwrap()).unwrap();
            prop_assert!((a - 1.0).abs() < 1e-12);
            let (_, a) = negative_cosine(&random_batch(4, 4, seed)).unwrap();
            prop_assert!(a < 1.0 - 1e-9);
        }
    }
}

