//! Nearest-category decision rule under squared L2, evaluated over row
//! chunks of the category matrix so memory stays within a byte budget.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bow::{ids_path, BowVector, CategoryBowMatrix};
use crate::error::{Error, Result};
use crate::store::{self, TensorRows};

/// Ranked candidate categories, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub ranked: Vec<(u32, f64)>,
}

impl Prediction {
    pub fn top(&self) -> Option<u32> {
        self.ranked.first().map(|&(id, _)| id)
    }

    pub fn contains_in_top(&self, label: u32, k: usize) -> bool {
        self.ranked.iter().take(k).any(|&(id, _)| id == label)
    }
}

/// Bounded ascending list of (id, score); equal scores order by id.
#[derive(Debug, Clone)]
pub(crate) struct TopK {
    k: usize,
    items: Vec<(u32, f64)>,
}

fn rank_cmp(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    pub(crate) fn push(&mut self, id: u32, score: f64) {
        let item = (id, score);
        if self.items.len() == self.k {
            match self.items.last() {
                Some(last) if rank_cmp(&item, last) == Ordering::Less => {}
                _ => return,
            }
        }
        let pos = self
            .items
            .partition_point(|x| rank_cmp(x, &item) == Ordering::Less);
        self.items.insert(pos, item);
        self.items.truncate(self.k);
    }

    pub(crate) fn into_prediction(self) -> Prediction {
        Prediction { ranked: self.items }
    }
}

/// Squared L2 between a histogram and one stored row, accumulated in f64
/// in index order.
pub fn squared_distance(bow: &[f64], row: &[f32]) -> f64 {
    bow.iter()
        .zip(row)
        .map(|(&a, &b)| {
            let d = a - b as f64;
            d * d
        })
        .sum()
}

fn check_query(bow: &BowVector, dim: usize, top_k: usize) -> Result<()> {
    if top_k == 0 {
        return Err(Error::Parameter("top_k must be at least 1".into()));
    }
    if bow.len() != dim {
        return Err(Error::Dimension(format!(
            "histogram has {} entries but category rows have {dim}",
            bow.len()
        )));
    }
    Ok(())
}

fn rows_per_chunk(budget: u64, dim: usize) -> Result<usize> {
    store::chunk_rows(budget, dim as u64, 4)
}

pub fn nearest_category(
    bow: &BowVector,
    matrix: &CategoryBowMatrix,
    top_k: usize,
    budget: u64,
) -> Result<Prediction> {
    check_query(bow, matrix.dim(), top_k)?;
    let step = rows_per_chunk(budget, matrix.dim())?;
    let ids = matrix.category_ids();
    let rows = matrix.rows();
    let mut top = TopK::new(top_k);
    let mut start = 0;
    while start < ids.len() {
        let end = (start + step).min(ids.len());
        for i in start..end {
            top.push(ids[i], squared_distance(bow.values(), rows.row(i)));
        }
        start = end;
    }
    Ok(top.into_prediction())
}

fn collect_items<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| Error::Item {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn batch_classify(
    bows: &[BowVector],
    matrix: &CategoryBowMatrix,
    top_k: usize,
    budget: u64,
) -> Result<Vec<Prediction>> {
    let results: Vec<Result<Prediction>> = bows
        .par_iter()
        .map(|b| nearest_category(b, matrix, top_k, budget))
        .collect();
    collect_items(results)
}

/// Classify many histograms against a category matrix on disk, reading it
/// one chunk of rows at a time. Each chunk is scored against every query
/// before the next is read.
pub fn classify_from_file(
    bows: &[BowVector],
    matrix_path: &Path,
    top_k: usize,
    budget: u64,
) -> Result<Vec<Prediction>> {
    let mut rows = TensorRows::open(matrix_path)?;
    let ids = store::read_tensor(ids_path(matrix_path))?.into_u32_vec()?;
    if ids.len() != rows.rows() {
        return Err(Error::Dimension(format!(
            "{} category ids for {} rows",
            ids.len(),
            rows.rows()
        )));
    }
    let dim = rows.cols();
    let checks: Vec<Result<()>> = bows.iter().map(|b| check_query(b, dim, top_k)).collect();
    collect_items(checks)?;
    let step = rows_per_chunk(budget, dim)?;

    let mut tops: Vec<TopK> = bows.iter().map(|_| TopK::new(top_k)).collect();
    let mut buf = Vec::new();
    let mut start = 0;
    while start < ids.len() {
        let count = step.min(ids.len() - start);
        rows.read_rows(start, count, &mut buf)?;
        let chunk_ids = &ids[start..start + count];
        tops.par_iter_mut().zip(bows).for_each(|(top, bow)| {
            for (r, &id) in buf.chunks_exact(dim.max(1)).zip(chunk_ids) {
                top.push(id, squared_distance(bow.values(), r));
            }
        });
        start += count;
    }
    Ok(tops.into_iter().map(TopK::into_prediction).collect())
}

/// Fraction of items whose label appears among the first `k` ranked entries.
pub fn top_k_accuracy(predictions: &[Prediction], labels: &[u32], k: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if let Some(i) = predictions.iter().position(|p| p.ranked.len() < k) {
        return Err(Error::Parameter(format!(
            "prediction {i} ranks {} categories, fewer than k = {k}",
            predictions[i].ranked.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &l)| p.contains_in_top(l, k))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}
