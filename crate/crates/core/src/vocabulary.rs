//! Two-stage vocabulary construction.
//!
//! Each category's descriptors are streamed through a fixed-size reservoir,
//! clustered into a small codebook and written to disk straight away, so
//! peak memory is bounded by one category's sample. The codebooks are then
//! stacked and clustered a second time into the final dictionary.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{minibatch_kmeans, Centroids, KMeansConfig, MatrixRows, RowSource};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::store;
use crate::DESCRIPTOR_DIM;

/// Algorithm R: a uniform fixed-size sample over a stream of unknown length.
#[derive(Debug)]
pub struct Reservoir<T> {
    cap: usize,
    seen: u64,
    items: Vec<T>,
    rng: ChaCha8Rng,
}

impl<T> Reservoir<T> {
    pub fn new(cap: usize, seed: u64) -> Result<Self> {
        if cap == 0 {
            return Err(Error::Parameter("reservoir capacity must be at least 1".into()));
        }
        Ok(Self {
            cap,
            seen: 0,
            items: Vec::with_capacity(cap.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn offer(&mut self, item: T) {
        self.seen += 1;
        if self.items.len() < self.cap {
            self.items.push(item);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if j < self.cap as u64 {
                self.items[j as usize] = item;
            }
        }
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn into_items(self) -> Vec<T> {
        self.items
    }
}

/// Keep a uniform sample of at most `cap` items; every item ends up in the
/// sample with probability `cap / n`. Short streams come back whole, in order.
pub fn reservoir_sample<T>(stream: impl IntoIterator<Item = T>, cap: usize, seed: u64) -> Result<Vec<T>> {
    let mut r = Reservoir::new(cap, seed)?;
    for item in stream {
        r.offer(item);
    }
    Ok(r.into_items())
}

/// Seed for one category, independent of every other category's.
pub fn category_seed(seed_base: u64, category_id: u32) -> u64 {
    seed_base ^ category_id as u64
}

/// Mini-batch settings used for both clustering stages.
pub fn kmeans_config(k: usize, seed: u64, cfg: &PipelineConfig) -> KMeansConfig {
    KMeansConfig {
        k,
        max_iterations: cfg.iterations,
        batch_size: cfg.batch_size,
        seed,
        ..KMeansConfig::new(k, seed)
    }
}

/// A category's visual words.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryCodebook {
    pub category_id: u32,
    pub codebook: Centroids,
    pub n_descriptors_seen: u64,
    /// Rows that went into clustering, at most the sample cap.
    pub n_sampled: usize,
}

/// Path the codebook of `category_id` is written to inside `dir`.
pub fn codebook_path(dir: &Path, category_id: u32) -> PathBuf {
    dir.join(format!("codebook_{category_id:05}.{}", store::TENSOR_EXT))
}

fn read_descriptor_file(path: &Path) -> Result<Matrix> {
    let m = store::read_matrix(path)?;
    if m.cols() != DESCRIPTOR_DIM && !(m.rows() == 0 && m.cols() == 0) {
        return Err(Error::Format {
            offset: 8,
            reason: format!(
                "{}: expected {DESCRIPTOR_DIM} columns, got {}",
                path.display(),
                m.cols()
            ),
        });
    }
    Ok(m)
}

/// Stream every descriptor of `files` through `f`, one file at a time.
pub(crate) fn for_each_descriptor_file(
    files: &[PathBuf],
    mut f: impl FnMut(&Matrix) -> Result<()>,
) -> Result<()> {
    for path in files {
        let m = read_descriptor_file(path)?;
        f(&m)?;
    }
    Ok(())
}

/// Sample a category's descriptors, cluster them into `k_per_category`
/// words and write the codebook to [`codebook_path`] under `out_dir`.
pub fn build_category_codebook(
    category_id: u32,
    descriptor_files: &[PathBuf],
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<CategoryCodebook> {
    let seed = category_seed(cfg.seed, category_id);
    let mut reservoir = Reservoir::<[f32; DESCRIPTOR_DIM]>::new(cfg.sample_cap, seed)?;
    for_each_descriptor_file(descriptor_files, |m| {
        for row in m.iter_rows() {
            reservoir.offer(row.try_into().expect("checked width"));
        }
        Ok(())
    })?;

    let seen = reservoir.seen();
    let k = cfg.k_per_category;
    if seen < k as u64 {
        return Err(Error::InsufficientData(format!(
            "category {category_id} has {seen} descriptors, needs at least {k}"
        )));
    }
    let sample = Matrix::from_rows(DESCRIPTOR_DIM, reservoir.items())?;
    drop(reservoir);

    let km = kmeans_config(k, seed.rotate_left(32), cfg);
    let result = minibatch_kmeans(&mut MatrixRows(&sample), &km).map_err(|e| match e {
        Error::InsufficientData(msg) => Error::InsufficientData(format!("category {category_id}: {msg}")),
        other => other,
    })?;

    store::write_matrix(codebook_path(out_dir, category_id), result.centroids.matrix())?;
    Ok(CategoryCodebook {
        category_id,
        codebook: result.centroids,
        n_descriptors_seen: seen,
        n_sampled: sample.rows(),
    })
}

/// Per-category codebooks stacked into one word matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedWords {
    pub words: Matrix,
    pub n_categories: usize,
    pub k_per_category: usize,
}

/// Row count of stacking `n_categories` codebooks of `k_per_category` words.
pub fn stacked_rows(n_categories: usize, k_per_category: usize) -> Result<usize> {
    n_categories
        .checked_mul(k_per_category)
        .ok_or_else(|| Error::Parameter("stacked vocabulary size overflows".into()))
}

/// Stack codebooks in ascending category order: row `i·k + j` is word `j` of
/// the `i`-th category.
pub fn merge_codebooks(codebooks: &[CategoryCodebook]) -> Result<StackedWords> {
    let first = codebooks
        .first()
        .ok_or_else(|| Error::InsufficientData("no codebooks to merge".into()))?;
    let (k, dim) = (first.codebook.k(), first.codebook.dim());
    let mut ordered: Vec<&CategoryCodebook> = codebooks.iter().collect();
    ordered.sort_by_key(|c| c.category_id);
    let mut words = Matrix::with_cols(dim);
    for cb in ordered {
        if cb.codebook.k() != k || cb.codebook.dim() != dim {
            return Err(Error::Dimension(format!(
                "category {} codebook is {}x{}, expected {k}x{dim}",
                cb.category_id,
                cb.codebook.k(),
                cb.codebook.dim()
            )));
        }
        words.extend(cb.codebook.matrix())?;
    }
    debug_assert_eq!(words.rows(), stacked_rows(codebooks.len(), k)?);
    Ok(StackedWords {
        words,
        n_categories: codebooks.len(),
        k_per_category: k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub categories_merged: usize,
    pub stacked_words: usize,
}

/// The final visual-word dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyDictionary {
    pub vocab: Centroids,
    /// Unknown when the dictionary was loaded from disk.
    pub provenance: Option<Provenance>,
}

impl VocabularyDictionary {
    pub fn new(vocab: Centroids) -> Self {
        Self {
            vocab,
            provenance: None,
        }
    }

    pub fn size(&self) -> usize {
        self.vocab.k()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        store::write_matrix(path, self.vocab.matrix())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m = store::read_matrix(path)?;
        Ok(Self::new(Centroids::new(m)?))
    }
}

/// Rows the dictionary will have: the stacked words pass through untouched
/// when there are no more of them than the target size.
pub fn dictionary_rows(stacked_words: usize, vocab_size: usize) -> usize {
    stacked_words.min(vocab_size)
}

/// Second-stage reduction of stacked words to `cfg.vocab_size` words.
pub fn reduce_vocabulary(stacked: &StackedWords, cfg: &PipelineConfig) -> Result<VocabularyDictionary> {
    reduce_vocabulary_from(&mut MatrixRows(&stacked.words), stacked.n_categories, cfg)
}

/// [`reduce_vocabulary`] over any row source, e.g. stacked words left on disk.
pub fn reduce_vocabulary_from(
    source: &mut impl RowSource,
    n_categories: usize,
    cfg: &PipelineConfig,
) -> Result<VocabularyDictionary> {
    let w = source.n_rows();
    let v = cfg.vocab_size;
    if w == 0 {
        return Err(Error::InsufficientData("no stacked words to reduce".into()));
    }
    if v == 0 {
        return Err(Error::Parameter("vocab_size must be at least 1".into()));
    }
    let provenance = Some(Provenance {
        categories_merged: n_categories,
        stacked_words: w,
    });
    let vocab = if w <= v {
        let mut m = Matrix::zeros(w, source.dim());
        for i in 0..w {
            source.read_row(i, m.row_mut(i))?;
        }
        Centroids::new(m)?
    } else {
        minibatch_kmeans(source, &kmeans_config(v, cfg.seed, cfg))?.centroids
    };
    Ok(VocabularyDictionary { vocab, provenance })
}
