//! Normalized visual-word histograms for categories and single images.

use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use crate::clustering::assign;
use crate::error::{Error, Result};
use crate::features::DescriptorSet;
use crate::matrix::Matrix;
use crate::store::{self, ManifestRecord, Tensor};
use crate::vocabulary::{for_each_descriptor_file, VocabularyDictionary};

/// Word histogram divided by the number of descriptors it counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BowVector {
    values: Vec<f64>,
    n_features: u64,
}

impl BowVector {
    /// Normalize raw word counts.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let n: u64 = counts.iter().sum();
        if n == 0 {
            return Err(Error::EmptyDescriptors);
        }
        let inv = n as f64;
        Ok(Self {
            values: counts.iter().map(|&c| c as f64 / inv).collect(),
            n_features: n,
        })
    }

    /// A histogram read back from disk; its descriptor count is not stored
    /// and reads as zero.
    pub fn from_values(values: Vec<f64>) -> Self {
        Self {
            values,
            n_features: 0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_features(&self) -> u64 {
        self.n_features
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// Histogram of the union of the descriptor sets behind `self` and `other`.
    pub fn merge(&self, other: &BowVector) -> Result<BowVector> {
        if self.len() != other.len() {
            return Err(Error::Dimension(format!(
                "cannot merge histograms of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        let (na, nb) = (self.n_features as f64, other.n_features as f64);
        let n = self.n_features + other.n_features;
        if n == 0 {
            return Err(Error::EmptyDescriptors);
        }
        Ok(BowVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (na * a + nb * b) / n as f64)
                .collect(),
            n_features: n,
        })
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    /// Write as a `(1, V)` tensor.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let m = Matrix::from_vec(1, self.len(), self.to_f32())?;
        store::write_matrix(path, &m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let m = store::read_matrix(path)?;
        if m.rows() != 1 {
            return Err(Error::Dimension(format!(
                "{}: histogram file must hold one row, found {}",
                path.display(),
                m.rows()
            )));
        }
        Ok(Self::from_values(
            m.as_slice().iter().map(|&v| v as f64).collect(),
        ))
    }
}

/// Add the word counts of `descriptors` into `counts`.
pub fn count_words(descriptors: &Matrix, dict: &VocabularyDictionary, counts: &mut [u64]) -> Result<()> {
    if descriptors.rows() == 0 {
        return Ok(());
    }
    if counts.len() != dict.size() {
        return Err(Error::Dimension(format!(
            "{} counters for a {}-word dictionary",
            counts.len(),
            dict.size()
        )));
    }
    for idx in assign(descriptors, &dict.vocab)?.indices {
        counts[idx] += 1;
    }
    Ok(())
}

pub fn build_bow(descriptors: &DescriptorSet, dict: &VocabularyDictionary) -> Result<BowVector> {
    build_bow_from_matrix(descriptors.matrix(), dict)
}

pub(crate) fn build_bow_from_matrix(descriptors: &Matrix, dict: &VocabularyDictionary) -> Result<BowVector> {
    if descriptors.rows() == 0 {
        return Err(Error::EmptyDescriptors);
    }
    let mut counts = vec![0u64; dict.size()];
    count_words(descriptors, dict, &mut counts)?;
    BowVector::from_counts(&counts)
}

/// Category histograms stacked row-wise, rows in ascending category order.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryBowMatrix {
    category_ids: Vec<u32>,
    rows: Matrix,
}

/// Companion file holding the category ids of a saved matrix.
pub fn ids_path(matrix_path: &Path) -> PathBuf {
    matrix_path.with_extension(format!("ids.{}", store::TENSOR_EXT))
}

impl CategoryBowMatrix {
    pub fn new(category_ids: Vec<u32>, rows: Matrix) -> Result<Self> {
        if category_ids.len() != rows.rows() {
            return Err(Error::Dimension(format!(
                "{} category ids for {} rows",
                category_ids.len(),
                rows.rows()
            )));
        }
        if category_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("category ids must be strictly increasing".into()));
        }
        Ok(Self { category_ids, rows })
    }

    pub fn from_bows(entries: Vec<(u32, BowVector)>) -> Result<Self> {
        let cols = entries.first().map_or(0, |(_, b)| b.len());
        let mut rows = Matrix::with_cols(cols);
        let mut ids = Vec::with_capacity(entries.len());
        for (id, bow) in entries {
            rows.push_row(&bow.to_f32())?;
            ids.push(id);
        }
        Self::new(ids, rows)
    }

    pub fn n_categories(&self) -> usize {
        self.category_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn category_ids(&self) -> &[u32] {
        &self.category_ids
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn row_bow(&self, i: usize) -> BowVector {
        BowVector::from_values(self.rows.row(i).iter().map(|&v| v as f64).collect())
    }

    /// Write the `(C, V)` matrix and its id file next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        store::write_matrix(path, &self.rows)?;
        store::write_tensor(ids_path(path), &Tensor::vector_u32(self.category_ids.clone()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rows = store::read_matrix(path)?;
        let ids = store::read_tensor(ids_path(path))?.into_u32_vec()?;
        Self::new(ids, rows)
    }
}

/// Per-category histogram file name.
pub fn category_bow_path(dir: &Path, category_id: u32) -> PathBuf {
    dir.join(format!("category_{category_id:05}.{}", store::TENSOR_EXT))
}

#[derive(Debug, Clone)]
pub struct CategoryBows {
    pub matrix: CategoryBowMatrix,
    /// Categories left out because they have no descriptors.
    pub excluded: Vec<u32>,
    /// Input records with `bow_path` and `n_descriptors` filled in.
    pub records: Vec<ManifestRecord>,
}

/// One histogram per category pooled over all of its descriptor files,
/// streamed file by file. Each row is written to `out_dir` as it is built.
/// Descriptor paths are resolved against `manifest_path`.
pub fn build_category_bows(
    records: &[ManifestRecord],
    manifest_path: &Path,
    dict: &VocabularyDictionary,
    out_dir: &Path,
) -> Result<CategoryBows> {
    let built: Vec<Result<(ManifestRecord, Option<BowVector>)>> = records
        .par_iter()
        .map(|rec| {
            let files: Vec<PathBuf> = rec
                .descriptor_paths
                .iter()
                .map(|p| store::resolve(manifest_path, p))
                .collect();
            let mut counts = vec![0u64; dict.size()];
            for_each_descriptor_file(&files, |m| count_words(m, dict, &mut counts))?;
            let mut rec = rec.clone();
            rec.n_descriptors = counts.iter().sum();
            match BowVector::from_counts(&counts) {
                Ok(bow) => {
                    let path = category_bow_path(out_dir, rec.category_id);
                    bow.save(&path)?;
                    rec.bow_path = Some(path);
                    Ok((rec, Some(bow)))
                }
                Err(Error::EmptyDescriptors) => {
                    warn!("category {} has no descriptors; excluded", rec.category_id);
                    rec.bow_path = None;
                    Ok((rec, None))
                }
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    let mut updated = Vec::new();
    for item in built {
        let (rec, bow) = item?;
        match bow {
            Some(b) => entries.push((rec.category_id, b)),
            None => excluded.push(rec.category_id),
        }
        updated.push(rec);
    }
    entries.sort_by_key(|(id, _)| *id);
    if entries.is_empty() {
        return Err(Error::InsufficientData("no category has any descriptors".into()));
    }
    Ok(CategoryBows {
        matrix: CategoryBowMatrix::from_bows(entries)?,
        excluded,
        records: updated,
    })
}

#[derive(Debug, Clone)]
pub struct ImageBows {
    pub bows: Vec<(String, BowVector)>,
    /// Images without descriptors.
    pub skipped: Vec<String>,
}

/// One histogram per descriptor file, written to `out_dir/<image_id>.bvwt`
/// where the image id is the input file stem.
pub fn build_test_bows(files: &[PathBuf], dict: &VocabularyDictionary, out_dir: &Path) -> Result<ImageBows> {
    let built: Vec<Result<(String, Option<BowVector>)>> = files
        .par_iter()
        .map(|path| {
            let id = store::file_id(path);
            let mut counts = vec![0u64; dict.size()];
            for_each_descriptor_file(std::slice::from_ref(path), |m| count_words(m, dict, &mut counts))?;
            match BowVector::from_counts(&counts) {
                Ok(bow) => {
                    bow.save(out_dir.join(format!("{id}.{}", store::TENSOR_EXT)))?;
                    Ok((id, Some(bow)))
                }
                Err(Error::EmptyDescriptors) => {
                    warn!("image {id} has no descriptors; skipped");
                    Ok((id, None))
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut out = ImageBows {
        bows: Vec::new(),
        skipped: Vec::new(),
    };
    for item in built {
        match item? {
            (id, Some(b)) => out.bows.push((id, b)),
            (id, None) => out.skipped.push(id),
        }
    }
    Ok(out)
}
