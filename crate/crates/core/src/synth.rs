//! Synthetic descriptor datasets with planted visual words.
//!
//! Each category owns a few random unit vectors in descriptor space. Every
//! descriptor of an image is one of its category's words plus isotropic
//! Gaussian noise, re-normalized. Any two planted words are at least 60°
//! apart, so category histograms are close to disjoint at low noise.
//!
//! Layout written under the output directory:
//!
//! ```text
//! manifest.jsonl          one record per category, paths relative
//! train/<image_id>.bvwt   (descriptors_per_image, 64) f32
//! test/<image_id>.bvwt
//! train_labels.jsonl      {"image_id", "category_id"} per image
//! test_labels.jsonl
//! planted_words.bvwt      (categories * words_per_category, 64)
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::store::{self, LabelRecord, ManifestRecord};
use crate::vocabulary::category_seed;
use crate::DESCRIPTOR_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub categories: usize,
    pub words_per_category: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub descriptors_per_image: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            categories: 50,
            words_per_category: 4,
            train_images: 30,
            test_images: 5,
            descriptors_per_image: 100,
            noise_sigma: 0.05,
            seed: 42,
        }
    }
}

/// Largest allowed cosine between two planted words (60°).
const MAX_COSINE: f64 = 0.5;
const MAX_ATTEMPTS_PER_WORD: usize = 10_000;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("categories", self.categories),
            ("words_per_category", self.words_per_category),
            ("train_images", self.train_images),
            ("descriptors_per_image", self.descriptors_per_image),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be at least 1")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise sigma must be a non-negative number, got {}",
                self.noise_sigma
            )));
        }
        if self.categories > 100_000 || self.train_images + self.test_images > 100_000 {
            return Err(Error::Parameter("at most 100,000 categories and images per category".into()));
        }
        Ok(())
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..DESCRIPTOR_DIM).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `n` unit vectors with pairwise cosine at most 0.5, by rejection.
pub fn plant_words(n: usize, seed: u64) -> Result<Matrix> {
    plant_separated(n, MAX_COSINE, seed)
}

fn plant_separated(n: usize, max_cosine: f64, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words: Vec<Vec<f64>> = Vec::with_capacity(n);
    for w in 0..n {
        let mut attempts = 0;
        let word = loop {
            if attempts == MAX_ATTEMPTS_PER_WORD {
                let degrees = max_cosine.acos().to_degrees();
                return Err(Error::Parameter(format!(
                    "could not place word {w} of {n} at least {degrees:.0} degrees from the others \
                     after {MAX_ATTEMPTS_PER_WORD} attempts; use fewer words"
                )));
            }
            attempts += 1;
            let cand = random_unit(&mut rng);
            let ok = words
                .iter()
                .all(|o| o.iter().zip(&cand).map(|(a, b)| a * b).sum::<f64>() <= max_cosine);
            if ok {
                break cand;
            }
        };
        words.push(word);
    }
    let data = words.iter().flatten().map(|&v| v as f32).collect();
    Matrix::from_vec(n, DESCRIPTOR_DIM, data)
}

pub fn image_id(category_id: u32, image: usize) -> String {
    format!("{category_id:05}_{image:05}")
}

/// One image's descriptors drawn around the given words.
pub fn sample_descriptors(words: &Matrix, n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut out = Matrix::with_cols(DESCRIPTOR_DIM);
    let mut buf = vec![0f32; DESCRIPTOR_DIM];
    for _ in 0..n {
        let w = words.row(rng.random_range(0..words.rows()));
        if sigma == 0.0 {
            buf.copy_from_slice(w);
        } else {
            let noisy: Vec<f64> = w
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(rng);
                    x as f64 + sigma * z
                })
                .collect();
            let norm = noisy.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (b, v) in buf.iter_mut().zip(noisy) {
                *b = (v / norm) as f32;
            }
        }
        out.push_row(&buf).expect("row width is fixed");
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSummary {
    pub categories: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub descriptors: u64,
    pub manifest: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRAIN_DIR: &str = "train";
pub const TEST_DIR: &str = "test";
pub const TRAIN_LABELS: &str = "train_labels.jsonl";
pub const TEST_LABELS: &str = "test_labels.jsonl";
pub const PLANTED_WORDS: &str = "planted_words.bvwt";

struct CategoryOutput {
    record: ManifestRecord,
    train: Vec<LabelRecord>,
    test: Vec<LabelRecord>,
}

/// Generate a dataset under `out_dir`. Output is byte-identical for a
/// given configuration.
pub fn generate(out_dir: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    cfg.validate()?;
    let words = plant_words(cfg.categories * cfg.words_per_category, cfg.seed)?;
    for d in [out_dir.to_path_buf(), out_dir.join(TRAIN_DIR), out_dir.join(TEST_DIR)] {
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    store::write_matrix(out_dir.join(PLANTED_WORDS), &words)?;

    let outputs: Vec<Result<CategoryOutput>> = (0..cfg.categories)
        .into_par_iter()
        .map(|c| {
            let id = c as u32;
            let start = c * cfg.words_per_category;
            let own: Vec<&[f32]> = (start..start + cfg.words_per_category).map(|i| words.row(i)).collect();
            let own = Matrix::from_rows(DESCRIPTOR_DIM, &own)?;
            let mut rng = ChaCha8Rng::seed_from_u64(category_seed(cfg.seed, id));
            let mut record = ManifestRecord {
                category_id: id,
                label: format!("category_{id:05}"),
                descriptor_paths: Vec::new(),
                codebook_path: None,
                bow_path: None,
                n_descriptors: 0,
            };
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for img in 0..cfg.train_images + cfg.test_images {
                let iid = image_id(id, img);
                let is_train = img < cfg.train_images;
                let sub = if is_train { TRAIN_DIR } else { TEST_DIR };
                let rel = PathBuf::from(sub).join(format!("{iid}.{}", store::TENSOR_EXT));
                let desc = sample_descriptors(&own, cfg.descriptors_per_image, cfg.noise_sigma, &mut rng);
                store::write_matrix(out_dir.join(&rel), &desc)?;
                let label = LabelRecord {
                    image_id: iid,
                    category_id: id,
                };
                if is_train {
                    record.descriptor_paths.push(rel);
                    record.n_descriptors += desc.rows() as u64;
                    train.push(label);
                } else {
                    test.push(label);
                }
            }
            Ok(CategoryOutput { record, train, test })
        })
        .collect();

    let mut records = Vec::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for o in outputs {
        let o = o?;
        records.push(o.record);
        train.extend(o.train);
        test.extend(o.test);
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    store::write_manifest(&manifest, &records)?;
    store::write_jsonl(&out_dir.join(TRAIN_LABELS), &train)?;
    store::write_jsonl(&out_dir.join(TEST_LABELS), &test)?;
    let per_image = cfg.descriptors_per_image as u64;
    Ok(SynthSummary {
        categories: cfg.categories,
        train_images: train.len(),
        test_images: test.len(),
        descriptors: (train.len() + test.len()) as u64 * per_image,
        manifest,
    })
}
