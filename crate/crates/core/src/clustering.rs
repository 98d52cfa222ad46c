//! k-means++ seeding, Lloyd's k-means (the reference) and mini-batch
//! k-means (the production path). All randomness flows from a seed.

use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{sq_dist, sq_dist_f64, Matrix};

/// Cluster centers, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    data: Matrix,
}

impl Centroids {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::Parameter("need at least one centroid".into()));
        }
        if !data.is_finite() {
            return Err(Error::Parameter("centroids must be finite".into()));
        }
        Ok(Self { data })
    }

    pub fn k(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.data.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    fn from_f64(k: usize, dim: usize, centers: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_vec(
            k,
            dim,
            centers.iter().map(|&v| v as f32).collect(),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iterations: usize,
    /// Lloyd stops once the relative inertia improvement drops below this.
    pub relative_inertia_tolerance: f64,
    /// Mini-batch only.
    pub batch_size: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iterations: 100,
            relative_inertia_tolerance: 1e-4,
            batch_size: 1024,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if !(self.relative_inertia_tolerance >= 0.0) {
            return Err(Error::Parameter("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Rows that can be drawn repeatedly and in any order.
pub trait RowSource {
    fn n_rows(&self) -> usize;
    fn dim(&self) -> usize;
    fn read_row(&mut self, i: usize, out: &mut [f32]) -> Result<()>;
}

/// [`RowSource`] over an in-memory matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatrixRows<'a>(pub &'a Matrix);

impl RowSource for MatrixRows<'_> {
    fn n_rows(&self) -> usize {
        self.0.rows()
    }

    fn dim(&self) -> usize {
        self.0.cols()
    }

    fn read_row(&mut self, i: usize, out: &mut [f32]) -> Result<()> {
        out.copy_from_slice(self.0.row(i));
        Ok(())
    }
}

fn nearest_in(x: &[f32], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist_f64(x, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn nearest_row(x: &[f32], centroids: &Centroids) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centroids.data.iter_rows().enumerate() {
        let d = sq_dist(x, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Nearest centroid per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub indices: Vec<usize>,
    /// Squared distance to the chosen centroid.
    pub distances: Vec<f64>,
}

const ASSIGN_CHUNK: usize = 256;

/// Assign each row to its nearest centroid under squared Euclidean
/// distance; ties go to the lowest centroid index.
pub fn assign(data: &Matrix, centroids: &Centroids) -> Result<Assignment> {
    if data.cols() != centroids.dim() {
        return Err(Error::Dimension(format!(
            "data has {} columns, centroids {}",
            data.cols(),
            centroids.dim()
        )));
    }
    let pairs: Vec<(usize, f64)> = if data.rows() >= 2 * ASSIGN_CHUNK {
        let dim = data.cols().max(1);
        data.as_slice()
            .par_chunks(dim * ASSIGN_CHUNK)
            .flat_map_iter(|chunk| {
                chunk
                    .chunks_exact(dim)
                    .map(|row| nearest_row(row, centroids))
                    .collect::<Vec<_>>()
            })
            .collect()
    } else {
        data.iter_rows().map(|r| nearest_row(r, centroids)).collect()
    };
    let (indices, distances) = pairs.into_iter().unzip();
    Ok(Assignment { indices, distances })
}

/// Mean squared distance from each row to its nearest centroid.
pub fn quantization_error(data: &Matrix, centroids: &Centroids) -> Result<f64> {
    if data.rows() == 0 {
        return Err(Error::UndefinedMetric(
            "quantization error of zero rows".into(),
        ));
    }
    let a = assign(data, centroids)?;
    Ok(a.distances.iter().sum::<f64>() / data.rows() as f64)
}

/// k-means++ seeding: the first center uniformly at random, each later one
/// with probability proportional to its squared distance to the nearest
/// chosen center. Once every remaining row coincides with a chosen center,
/// the rest are drawn uniformly from unchosen rows.
pub fn kmeans_pp_init(data: &Matrix, k: usize, seed: u64) -> Result<Centroids> {
    let n = data.rows();
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{n} rows cannot seed {k} centers"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = data.iter_rows().map(|r| sq_dist(r, data.row(first))).collect();

    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                acc += w;
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just above the final sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        taken[pick] = true;
        let row = data.row(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), row));
        }
    }

    let mut m = Matrix::with_cols(data.cols());
    for &i in &chosen {
        m.push_row(data.row(i))?;
    }
    Centroids::new(m)
}

#[derive(Debug, Clone)]
pub struct LloydResult {
    pub centroids: Centroids,
    /// Sum over rows of squared distance to the nearest centroid.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step, starting from the seeding.
    pub inertia_trace: Vec<f64>,
}

/// Lloyd's k-means from a k-means++ start. Empty clusters take over the
/// point farthest from its current centroid.
pub fn lloyd_kmeans(data: &Matrix, cfg: &KMeansConfig) -> Result<LloydResult> {
    cfg.validate()?;
    let (n, dim, k) = (data.rows(), data.cols(), cfg.k);
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{n} rows cannot form {k} clusters"
        )));
    }
    let init = kmeans_pp_init(data, k, cfg.seed)?;
    let mut centers: Vec<f64> = init.data.as_slice().iter().map(|&v| v as f64).collect();
    let mut labels = vec![0usize; n];
    let mut dists = vec![0f64; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    let assign_all = |centers: &[f64], labels: &mut [usize], dists: &mut [f64]| -> f64 {
        let mut inertia = 0.0;
        for (i, row) in data.iter_rows().enumerate() {
            let (c, d) = nearest_in(row, centers, dim);
            labels[i] = c;
            dists[i] = d;
            inertia += d;
        }
        inertia
    };

    let mut inertia = assign_all(&centers, &mut labels, &mut dists);
    trace.push(inertia);
    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut counts = vec![0usize; k];
        for &c in &labels {
            counts[c] += 1;
        }
        repair_empty(&mut labels, &mut dists, &mut counts);

        let mut sums = vec![0f64; k * dim];
        for (row, &c) in data.iter_rows().zip(&labels) {
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centers[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *dst = s * inv;
            }
        }

        let next = assign_all(&centers, &mut labels, &mut dists);
        trace.push(next);
        let improvement = inertia - next;
        inertia = next;
        if inertia == 0.0 || improvement <= cfg.relative_inertia_tolerance * (inertia + improvement) {
            break;
        }
    }

    let centroids = Centroids::from_f64(k, dim, &centers)?;
    // report inertia against the f32 centroids actually returned
    let inertia = data
        .iter_rows()
        .map(|r| nearest_row(r, &centroids).1)
        .sum();
    Ok(LloydResult {
        centroids,
        inertia,
        iterations,
        inertia_trace: trace,
    })
}

/// Give each empty cluster the point farthest from its centroid, taking
/// points in decreasing distance order and never from a singleton cluster.
fn repair_empty(labels: &mut [usize], dists: &mut [f64], counts: &mut [usize]) {
    let empty: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == 0).collect();
    if empty.is_empty() {
        return;
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
    let mut candidates = order.into_iter();
    for c in empty {
        for i in candidates.by_ref() {
            let from = labels[i];
            if counts[from] > 1 {
                counts[from] -= 1;
                labels[i] = c;
                dists[i] = 0.0;
                counts[c] = 1;
                break;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MiniBatchResult {
    pub centroids: Centroids,
    /// Number of times a stale center was moved onto a batch row.
    pub reseeds: usize,
    /// Rows used for the k-means++ start.
    pub init_rows: usize,
}

/// A center that has not been the nearest for this many assignments (times
/// k) is moved onto a row of the current batch.
const STALE_FACTOR: u64 = 5;

/// Mini-batch k-means over a re-drawable source.
///
/// Seeds with k-means++ on `min(n, max(3k, 1000))` sampled rows, then runs
/// exactly `max_iterations` batches. Each batch of `batch_size` rows is
/// drawn with replacement and assigned against the centers as they stood
/// before the batch; every assigned row then pulls its center by
/// `c ← (1 − η)c + ηx` with `η = 1 / count[c]`.
pub fn minibatch_kmeans(source: &mut impl RowSource, cfg: &KMeansConfig) -> Result<MiniBatchResult> {
    cfg.validate()?;
    let (n, dim, k) = (source.n_rows(), source.dim(), cfg.k);
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{n} rows cannot form {k} clusters"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let init_rows = n.min((3 * k).max(1000));
    let mut picks: Vec<usize> = if init_rows == n {
        (0..n).collect()
    } else {
        index::sample(&mut rng, n, init_rows).into_vec()
    };
    picks.sort_unstable();
    let mut sample = Matrix::zeros(init_rows, dim);
    for (dst, &i) in picks.iter().enumerate() {
        source.read_row(i, sample.row_mut(dst))?;
    }
    let distinct = sample
        .iter_rows()
        .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len();
    if distinct < k {
        return Err(Error::InsufficientData(format!(
            "{distinct} distinct rows cannot form {k} clusters"
        )));
    }
    let init = kmeans_pp_init(&sample, k, rng.next_u64())?;
    drop(sample);

    let mut centers: Vec<f64> = init.data.as_slice().iter().map(|&v| v as f64).collect();
    let mut counts = vec![0u64; k];
    let mut last_used = vec![0u64; k];
    let mut assigned_total = 0u64;
    let stale_after = STALE_FACTOR * k as u64;
    let mut reseeds = 0;

    let mut batch = Matrix::zeros(cfg.batch_size, dim);
    let mut nearest = vec![0usize; cfg.batch_size];
    for _ in 0..cfg.max_iterations {
        for r in 0..cfg.batch_size {
            let i = rng.random_range(0..n);
            source.read_row(i, batch.row_mut(r))?;
        }
        if cfg.batch_size >= 2 * ASSIGN_CHUNK {
            batch
                .as_slice()
                .par_chunks(dim * ASSIGN_CHUNK)
                .zip(nearest.par_chunks_mut(ASSIGN_CHUNK))
                .for_each(|(rows, out)| {
                    for (row, o) in rows.chunks_exact(dim).zip(out) {
                        *o = nearest_in(row, &centers, dim).0;
                    }
                });
        } else {
            for (row, o) in batch.iter_rows().zip(nearest.iter_mut()) {
                *o = nearest_in(row, &centers, dim).0;
            }
        }
        for (row, &c) in batch.iter_rows().zip(&nearest) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (dst, &x) in centers[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *dst += eta * (x as f64 - *dst);
            }
            assigned_total += 1;
            last_used[c] = assigned_total;
        }

        let mut d2: Option<Vec<f64>> = None;
        for c in 0..k {
            if assigned_total - last_used[c] < stale_after {
                continue;
            }
            last_used[c] = assigned_total;
            // draw a batch row in proportion to how badly it is served
            let d2 = d2.get_or_insert_with(|| {
                batch
                    .iter_rows()
                    .map(|r| nearest_in(r, &centers, dim).1)
                    .collect()
            });
            let total: f64 = d2.iter().sum();
            if total <= 0.0 {
                continue;
            }
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = d2.iter().rposition(|&w| w > 0.0).unwrap();
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = i;
                    break;
                }
            }
            let row = batch.row(pick);
            for (dst, &x) in centers[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *dst = x as f64;
            }
            counts[c] = 1;
            reseeds += 1;
            for (d, r) in d2.iter_mut().zip(batch.iter_rows()) {
                *d = d.min(sq_dist(r, row));
            }
        }
    }

    Ok(MiniBatchResult {
        centroids: Centroids::from_f64(k, dim, &centers)?,
        reseeds,
        init_rows,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};
    use rand_distr::{Distribution, Normal};

    /// `per_blob` points around each of `means`, with isotropic noise.
    pub(crate) fn blobs(means: &[Vec<f32>], per_blob: usize, sigma: f32, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, sigma).unwrap();
        let mut m = Matrix::with_cols(means[0].len());
        for mean in means {
            for _ in 0..per_blob {
                let row: Vec<f32> = mean.iter().map(|&c| c + noise.sample(&mut rng)).collect();
                m.push_row(&row).unwrap();
            }
        }
        m
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn row_set(m: &Matrix) -> Vec<Vec<u32>> {
        let mut v: Vec<Vec<u32>> = m
            .iter_rows()
            .map(|r| r.iter().map(|x| x.to_bits()).collect())
            .collect();
        v.sort();
        v
    }

    #[test]
    fn pp_init_with_n_equal_k_is_permutation() {
        let data = random_matrix(12, 64, 1);
        let c = kmeans_pp_init(&data, 12, 9).unwrap();
        assert_eq!(row_set(c.matrix()), row_set(&data));
        assert_eq!(quantization_error(&data, &c).unwrap(), 0.0);
    }

    #[test]
    fn pp_init_single_center_is_a_data_row() {
        let data = random_matrix(30, 64, 2);
        let c = kmeans_pp_init(&data, 1, 4).unwrap();
        assert!(data.iter_rows().any(|r| r == c.row(0)));
    }

    #[test]
    fn pp_init_rejects_too_few_rows() {
        let data = random_matrix(3, 4, 2);
        assert!(matches!(kmeans_pp_init(&data, 4, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn pp_init_duplicates_still_fill_k() {
        let mut data = Matrix::with_cols(2);
        for _ in 0..5 {
            data.push_row(&[1.0, 1.0]).unwrap();
        }
        let c = kmeans_pp_init(&data, 3, 0).unwrap();
        assert_eq!(c.k(), 3);
    }

    #[test]
    fn pp_init_second_center_jumps_blobs() {
        let mut a = vec![0f32; 64];
        let mut b = vec![0f32; 64];
        a[0] = 0.0;
        b[0] = 100.0;
        let data = blobs(&[a, b], 50, 0.1, 5);

        // exact probability that the second draw lands in the other blob,
        // averaged over the uniform first draw
        let n = data.rows();
        let mut p_other = 0.0;
        for first in 0..n {
            let d2: Vec<f64> = data.iter_rows().map(|r| sq_dist(r, data.row(first))).collect();
            let total: f64 = d2.iter().sum();
            let other: f64 = d2
                .iter()
                .enumerate()
                .filter(|&(i, _)| (i < 50) != (first < 50))
                .map(|(_, d)| d)
                .sum();
            p_other += other / total / n as f64;
        }
        assert!(p_other >= 0.99, "exact probability {p_other}");

        let hits = (0..1000)
            .filter(|&seed| {
                let c = kmeans_pp_init(&data, 2, seed).unwrap();
                (c.row(0)[0] > 50.0) != (c.row(1)[0] > 50.0)
            })
            .count();
        assert!(hits >= 990, "{hits} of 1000");
    }

    #[test]
    fn lloyd_square_corners() {
        let data = Matrix::from_rows(2, &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let r = lloyd_kmeans(&data, &KMeansConfig::new(4, 3)).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(row_set(r.centroids.matrix()), row_set(&data));
    }

    #[test]
    fn lloyd_single_cluster_is_mean() {
        let data = random_matrix(40, 64, 7);
        let r = lloyd_kmeans(&data, &KMeansConfig::new(1, 0)).unwrap();
        let mut total_ss = 0.0;
        for j in 0..64 {
            let mean: f64 = data.iter_rows().map(|r| r[j] as f64).sum::<f64>() / 40.0;
            assert!((r.centroids.row(0)[j] as f64 - mean).abs() < 1e-6);
            total_ss += data.iter_rows().map(|r| (r[j] as f64 - mean).powi(2)).sum::<f64>();
        }
        assert!((r.inertia - total_ss).abs() < 1e-4 * total_ss);
    }

    #[test]
    fn lloyd_two_blobs_matches_exhaustive_optimum() {
        let mut far = vec![0f32; 64];
        far[3] = 10.0;
        let data = blobs(&[vec![0f32; 64], far], 10, 0.1, 11);

        // brute force over all 2-partitions of the 20 points
        let n = data.rows();
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..(1 << n) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).collect();
                for j in 0..64 {
                    let mean = members.iter().map(|&i| data.row(i)[j] as f64).sum::<f64>()
                        / members.len() as f64;
                    cost += members.iter().map(|&i| (data.row(i)[j] as f64 - mean).powi(2)).sum::<f64>();
                }
            }
            if cost < best.0 {
                best = (cost, mask);
            }
        }
        assert_eq!(best.1 & 0x3ff, if best.1 & 1 == 1 { 0x3ff } else { 0 });

        let r = lloyd_kmeans(&data, &KMeansConfig::new(2, 1)).unwrap();
        assert!((r.inertia - best.0).abs() < 1e-3 * best.0);
        for blob in 0..2 {
            let mean: Vec<f64> = (0..64)
                .map(|j| (0..10).map(|i| data.row(blob * 10 + i)[j] as f64).sum::<f64>() / 10.0)
                .collect();
            let closest = (0..2)
                .map(|c| {
                    r.centroids.row(c).iter().zip(&mean).map(|(&a, b)| (a as f64 - b).powi(2)).sum::<f64>().sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(closest < 0.15, "blob {blob}: {closest}");
        }
    }

    #[test]
    fn lloyd_inertia_never_increases() {
        for seed in 0..5 {
            let data = random_matrix(300, 8, seed);
            let mut cfg = KMeansConfig::new(6, seed);
            cfg.relative_inertia_tolerance = 0.0;
            let r = lloyd_kmeans(&data, &cfg).unwrap();
            for w in r.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", r.inertia_trace);
            }
        }
    }

    #[test]
    fn lloyd_repairs_empty_clusters() {
        // identical rows except one: seeding must still produce k non-empty clusters
        let mut data = Matrix::with_cols(2);
        for _ in 0..6 {
            data.push_row(&[0.0, 0.0]).unwrap();
        }
        data.push_row(&[5.0, 5.0]).unwrap();
        let r = lloyd_kmeans(&data, &KMeansConfig::new(3, 0)).unwrap();
        assert!(r.centroids.matrix().is_finite());
        assert_eq!(r.centroids.k(), 3);
    }

    #[test]
    fn assign_exact_match_and_ties() {
        let cents = Centroids::new(
            Matrix::from_rows(2, &[[9.0, 9.0], [1.0, 0.0], [5.0, 5.0], [3.0, 3.0], [-1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let data = Matrix::from_rows(2, &[[3.0, 3.0], [0.0, 0.0]]).unwrap();
        let a = assign(&data, &cents).unwrap();
        assert_eq!(a.indices, [3, 1]);
        assert_eq!(a.distances[0], 0.0);
        assert_eq!(a.distances[1], 1.0);
    }

    #[test]
    fn assign_matches_naive_double_loop() {
        let data = random_matrix(50, 64, 21);
        let cents = Centroids::new(random_matrix(7, 64, 22)).unwrap();
        let a = assign(&data, &cents).unwrap();
        for i in 0..50 {
            let mut best = (0, f64::INFINITY);
            for c in 0..7 {
                let mut d = 0.0;
                for j in 0..64 {
                    d += (data.row(i)[j] as f64 - cents.row(c)[j] as f64).powi(2);
                }
                if d < best.1 {
                    best = (c, d);
                }
            }
            assert_eq!(a.indices[i], best.0);
            assert_eq!(a.distances[i], best.1);
        }
    }

    #[test]
    fn assign_parallel_path_is_stable() {
        let data = random_matrix(2000, 16, 3);
        let cents = Centroids::new(random_matrix(9, 16, 4)).unwrap();
        let a = assign(&data, &cents).unwrap();
        let b = assign(&data, &cents).unwrap();
        assert_eq!(a, b);
        let serial: Vec<usize> = data.iter_rows().map(|r| nearest_row(r, &cents).0).collect();
        assert_eq!(a.indices, serial);
    }

    #[test]
    fn assign_dimension_mismatch() {
        let cents = Centroids::new(Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(assign(&Matrix::zeros(1, 4), &cents), Err(Error::Dimension(_))));
    }

    #[test]
    fn quantization_error_cases() {
        let cents = Centroids::new(Matrix::from_rows(2, &[[0.0, 0.0]]).unwrap()).unwrap();
        let data = Matrix::from_rows(2, &[[3.0, 4.0]]).unwrap();
        assert_eq!(quantization_error(&data, &cents).unwrap(), 25.0);
        assert_eq!(quantization_error(cents.matrix(), &cents).unwrap(), 0.0);
        assert!(matches!(
            quantization_error(&Matrix::with_cols(2), &cents),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn lloyd_beats_random_centroids() {
        let means: Vec<Vec<f32>> = (0..4)
            .map(|b| (0..64).map(|j| if j == b { 8.0 } else { 0.0 }).collect())
            .collect();
        for seed in 0..20 {
            let data = blobs(&means, 25, 0.5, seed);
            let lloyd = lloyd_kmeans(&data, &KMeansConfig::new(4, seed)).unwrap();
            let random = Centroids::new(random_matrix(4, 64, seed + 100)).unwrap();
            assert!(
                quantization_error(&data, &lloyd.centroids).unwrap()
                    <= quantization_error(&data, &random).unwrap()
            );
        }
    }

    #[test]
    fn minibatch_recovers_distinct_rows_exactly() {
        let distinct = random_matrix(6, 64, 31);
        let mut data = Matrix::with_cols(64);
        for _ in 0..20 {
            data.extend(&distinct).unwrap();
        }
        let mut cfg = KMeansConfig::new(6, 17);
        cfg.batch_size = 32;
        cfg.max_iterations = 200;
        let r = minibatch_kmeans(&mut MatrixRows(&data), &cfg).unwrap();
        let qe = quantization_error(&data, &r.centroids).unwrap();
        assert!(qe.abs() <= 1e-9, "{qe}");
    }

    #[test]
    fn minibatch_rejects_too_few_distinct_rows() {
        let mut data = Matrix::with_cols(4);
        for _ in 0..10 {
            data.push_row(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        }
        data.push_row(&[0.0; 4]).unwrap();
        let r = minibatch_kmeans(&mut MatrixRows(&data), &KMeansConfig::new(3, 0));
        assert!(matches!(r, Err(Error::InsufficientData(_))));
        let r = minibatch_kmeans(&mut MatrixRows(&Matrix::zeros(2, 4)), &KMeansConfig::new(3, 0));
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    fn match_distance(a: &Centroids, b: &Centroids) -> f64 {
        // k = 2: best of the two pairings, largest per-center gap
        let d = |i: usize, j: usize| sq_dist(a.row(i), b.row(j)).sqrt();
        f64::min(d(0, 0).max(d(1, 1)), d(0, 1).max(d(1, 0)))
    }

    #[test]
    fn minibatch_agrees_with_lloyd_on_two_blobs() {
        let mut far = vec![0f32; 64];
        far[0] = 10.0;
        let data = blobs(&[vec![0f32; 64], far], 100, 0.1, 8);
        let mut cfg = KMeansConfig::new(2, 5);
        cfg.batch_size = 256;
        cfg.max_iterations = 100;
        let mb = minibatch_kmeans(&mut MatrixRows(&data), &cfg).unwrap();
        let lloyd = lloyd_kmeans(&data, &cfg).unwrap();
        let gap = match_distance(&mb.centroids, &lloyd.centroids);
        assert!(gap < 0.2, "{gap}");
    }

    #[test]
    fn minibatch_is_deterministic() {
        let data = random_matrix(500, 16, 9);
        let mut cfg = KMeansConfig::new(5, 77);
        cfg.batch_size = 64;
        cfg.max_iterations = 50;
        let a = minibatch_kmeans(&mut MatrixRows(&data), &cfg).unwrap();
        let b = minibatch_kmeans(&mut MatrixRows(&data), &cfg).unwrap();
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn one_full_batch_moves_centers_toward_their_points() {
        let means: Vec<Vec<f32>> = (0..3)
            .map(|b| (0..8).map(|j| if j == b { 6.0 } else { 0.0 }).collect())
            .collect();
        let data = blobs(&means, 40, 0.4, 3);
        let mut cfg = KMeansConfig::new(3, 2);
        cfg.max_iterations = 0;
        let init = minibatch_kmeans(&mut MatrixRows(&data), &cfg).unwrap().centroids;
        cfg.max_iterations = 1;
        cfg.batch_size = data.rows();
        let after = minibatch_kmeans(&mut MatrixRows(&data), &cfg).unwrap().centroids;

        // replay the batch to find each center's assigned points
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let _ = rng.next_u64();
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.rows())).collect();
        let mut batch = Matrix::with_cols(8);
        for &i in &picks {
            batch.push_row(data.row(i)).unwrap();
        }
        let a = assign(&batch, &init).unwrap();
        for c in 0..3 {
            let members: Vec<usize> = (0..batch.rows()).filter(|&i| a.indices[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f32> = (0..8)
                .map(|j| (members.iter().map(|&i| batch.row(i)[j] as f64).sum::<f64>() / members.len() as f64) as f32)
                .collect();
            assert!(sq_dist(after.row(c), &mean) < sq_dist(init.row(c), &mean));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn minibatch_stays_in_bounding_box(seed in 0u64..500, k in 1usize..6) {
            let data = random_matrix(60, 4, seed);
            let mut cfg = KMeansConfig::new(k, seed);
            cfg.batch_size = 16;
            cfg.max_iterations = 40;
            let r = minibatch_kmeans(&mut MatrixRows(&data), &cfg).unwrap();
            for j in 0..4 {
                let lo = data.iter_rows().map(|r| r[j]).fold(f32::INFINITY, f32::min);
                let hi = data.iter_rows().map(|r| r[j]).fold(f32::NEG_INFINITY, f32::max);
                for c in 0..k {
                    let v = r.centroids.row(c)[j];
                    prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
                }
            }
        }

        #[test]
        fn assign_is_repeatable(seed in 0u64..1000) {
            let data = random_matrix(20, 5, seed);
            let cents = Centroids::new(random_matrix(4, 5, seed + 1)).unwrap();
            prop_assert_eq!(assign(&data, &cents).unwrap(), assign(&data, &cents).unwrap());
        }
    }
}
