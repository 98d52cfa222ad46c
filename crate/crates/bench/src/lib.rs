//! Deterministic inputs shared by the benchmarks.

use bovw_core::bow::{BowVector, CategoryBowMatrix};
use bovw_core::{Centroids, Matrix, RasterImage, DESCRIPTOR_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` random unit rows in descriptor space.
pub fn unit_rows(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(n, DESCRIPTOR_DIM);
    for i in 0..n {
        let row = m.row_mut(i);
        for v in row.iter_mut() {
            *v = rng.random_range(-1.0f32..1.0);
        }
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    m
}

pub fn centroids(k: usize, seed: u64) -> Centroids {
    Centroids::new(unit_rows(k, seed)).expect("non-empty")
}

pub fn random_bow(v: usize, rng: &mut ChaCha8Rng) -> BowVector {
    let mut counts: Vec<u64> = (0..v).map(|_| rng.random_range(0..5)).collect();
    counts[0] += 1;
    BowVector::from_counts(&counts).expect("non-zero counts")
}

pub fn category_matrix(c: usize, v: usize, seed: u64) -> CategoryBowMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..c as u32).map(|id| (id, random_bow(v, &mut rng))).collect();
    CategoryBowMatrix::from_bows(rows).expect("distinct ids")
}

/// Scattered Gaussian blobs on a dark background.
pub fn blob_image(side: u32, blobs: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<(f64, f64, f64)> = (0..blobs)
        .map(|_| {
            let margin = side as f64 * 0.1;
            (
                rng.random_range(margin..side as f64 - margin),
                rng.random_range(margin..side as f64 - margin),
                rng.random_range(2.0..8.0),
            )
        })
        .collect();
    RasterImage::from_fn(side, side, |x, y| {
        let v: f64 = centres
            .iter()
            .map(|&(cx, cy, s)| (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        (255.0 * v.min(1.0)).round() as u8
    })
    .expect("non-empty image")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(unit_rows(10, 3), unit_rows(10, 3));
        assert_eq!(blob_image(64, 4, 1), blob_image(64, 4, 1));
    }
}
