//! Stage drivers: each reads the artifacts of the previous stage from disk,
//! writes its own, and returns a serializable summary.
//!
//! Per-category work runs on a thread pool of `cfg.workers` threads.
//! Outputs do not depend on the number of workers.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bow::{build_category_bows, build_test_bows, BowVector, CategoryBowMatrix};
use crate::classify::{classify_from_file, top_k_accuracy, Prediction};
use crate::clustering::Centroids;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::neural::{mapper_forward, train_head, train_mapper, ModelMeta, NeuralModel, TrainConfig};
use crate::store::{self, LabelRecord, ManifestRecord, TensorRows};
use crate::vocabulary::{
    build_category_codebook, codebook_path, merge_codebooks, reduce_vocabulary, reduce_vocabulary_from,
    stacked_rows, CategoryCodebook, VocabularyDictionary,
};
use crate::DESCRIPTOR_DIM;

/// Run `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start {workers} worker threads: {e}")))?;
    pool.install(f)
}

/// `<dir>/<stem>_<suffix>` next to `path`.
pub fn sibling_dir(path: &Path, suffix: &str) -> PathBuf {
    let stem = store::file_id(path);
    path.with_file_name(format!("{stem}_{suffix}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

/// Manifest records with descriptor paths made absolute, so the manifest can
/// be written into another directory.
fn rebase(records: Vec<ManifestRecord>, manifest_path: &Path) -> Result<Vec<ManifestRecord>> {
    records
        .into_iter()
        .map(|mut r| {
            r.descriptor_paths = r
                .descriptor_paths
                .iter()
                .map(|p| absolute(&store::resolve(manifest_path, p)))
                .collect::<Result<_>>()?;
            Ok(r)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabSummary {
    pub categories: usize,
    /// Categories with fewer descriptors (or distinct descriptors) than
    /// `k_per_category`.
    pub skipped: Vec<u32>,
    /// Stacked first-stage words.
    pub stacked_words: usize,
    pub vocab_size: usize,
    /// Whether the stacked words exceeded the memory budget and were reduced
    /// from disk.
    pub reduced_from_disk: bool,
    pub dictionary: PathBuf,
    pub codebook_dir: PathBuf,
}

/// Per-category codebooks, their merge and the reduction to the final
/// dictionary at `dict_path`. Codebooks and an updated manifest go to
/// `<dict stem>_codebooks/`.
pub fn run_vocab(manifest_path: &Path, dict_path: &Path, cfg: &PipelineConfig) -> Result<VocabSummary> {
    cfg.validate()?;
    let records = store::read_manifest(manifest_path)?;
    if records.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} lists no categories",
            manifest_path.display()
        )));
    }
    let codebook_dir = sibling_dir(dict_path, "codebooks");
    create_dir(&codebook_dir)?;

    let built: Vec<Result<Option<(u32, u64)>>> = with_workers(cfg.workers, || {
        Ok(records
            .par_iter()
            .map(|rec| {
                let files: Vec<PathBuf> = rec
                    .descriptor_paths
                    .iter()
                    .map(|p| store::resolve(manifest_path, p))
                    .collect();
                match build_category_codebook(rec.category_id, &files, cfg, &codebook_dir) {
                    Ok(cb) => {
                        info!(
                            "category {}: {} descriptors seen, {} sampled",
                            cb.category_id, cb.n_descriptors_seen, cb.n_sampled
                        );
                        Ok(Some((cb.category_id, cb.n_descriptors_seen)))
                    }
                    Err(Error::InsufficientData(msg)) => {
                        warn!("skipping: {msg}");
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect())
    })?;

    let mut used = Vec::new();
    let mut skipped = Vec::new();
    let mut updated = Vec::with_capacity(records.len());
    for (rec, res) in records.iter().zip(built) {
        let mut rec = rec.clone();
        match res? {
            Some((id, seen)) => {
                rec.codebook_path = Some(absolute(&codebook_path(&codebook_dir, id))?);
                rec.n_descriptors = seen;
                used.push(id);
            }
            None => {
                rec.codebook_path = None;
                skipped.push(rec.category_id);
            }
        }
        updated.push(rec);
    }
    if used.is_empty() {
        return Err(Error::InsufficientData(format!(
            "every category has fewer than {} usable descriptors",
            cfg.k_per_category
        )));
    }
    store::write_manifest(codebook_dir.join(crate::synth::MANIFEST_FILE), &rebase(updated, manifest_path)?)?;

    let w = stacked_rows(used.len(), cfg.k_per_category)?;
    let stacked_bytes = (w as u64).saturating_mul((DESCRIPTOR_DIM * 4) as u64);
    let reduced_from_disk = stacked_bytes > cfg.memory_budget_bytes;
    let dict = with_workers(cfg.workers, || {
        if reduced_from_disk {
            let files: Vec<PathBuf> = used.iter().map(|&id| codebook_path(&codebook_dir, id)).collect();
            let stacked_path = codebook_dir.join(format!("stacked.{}", store::TENSOR_EXT));
            store::concat_matrices(&stacked_path, &files)?;
            info!("{w} stacked words exceed the memory budget; reducing from {}", stacked_path.display());
            reduce_vocabulary_from(&mut TensorRows::open(&stacked_path)?, used.len(), cfg)
        } else {
            let codebooks = used
                .iter()
                .map(|&id| {
                    Ok(CategoryCodebook {
                        category_id: id,
                        codebook: Centroids::new(store::read_matrix(codebook_path(&codebook_dir, id))?)?,
                        n_descriptors_seen: 0,
                        n_sampled: 0,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            reduce_vocabulary(&merge_codebooks(&codebooks)?, cfg)
        }
    })?;
    ensure_parent(dict_path)?;
    dict.save(dict_path)?;
    Ok(VocabSummary {
        categories: records.len(),
        skipped,
        stacked_words: w,
        vocab_size: dict.size(),
        reduced_from_disk,
        dictionary: dict_path.to_path_buf(),
        codebook_dir,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BowSummary {
    pub categories: usize,
    /// Categories without descriptors, left out of the matrix.
    pub excluded: Vec<u32>,
    pub shape: (usize, usize),
    pub matrix: PathBuf,
    pub rows_dir: PathBuf,
}

/// Category histograms against the dictionary, written as the `(C, V)`
/// matrix at `matrix_path` (plus its id file) and as per-category rows with
/// an updated manifest under `<matrix stem>_rows/`.
pub fn run_bow(
    manifest_path: &Path,
    dict_path: &Path,
    matrix_path: &Path,
    cfg: &PipelineConfig,
) -> Result<BowSummary> {
    cfg.validate()?;
    let dict = VocabularyDictionary::load(dict_path)?;
    let records = store::read_manifest(manifest_path)?;
    let rows_dir = sibling_dir(matrix_path, "rows");
    create_dir(&rows_dir)?;
    let out = with_workers(cfg.workers, || build_category_bows(&records, manifest_path, &dict, &rows_dir))?;
    for id in &out.excluded {
        warn!("category {id} has no descriptors and is excluded");
    }
    ensure_parent(matrix_path)?;
    out.matrix.save(matrix_path)?;
    store::write_manifest(rows_dir.join(crate::synth::MANIFEST_FILE), &rebase(out.records, manifest_path)?)?;
    Ok(BowSummary {
        categories: out.matrix.n_categories(),
        excluded: out.excluded,
        shape: (out.matrix.n_categories(), out.matrix.dim()),
        matrix: matrix_path.to_path_buf(),
        rows_dir,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BowTestSummary {
    pub images: usize,
    /// Images without descriptors.
    pub skipped: Vec<String>,
    pub out_dir: PathBuf,
}

/// One histogram per descriptor file directly inside `image_dir`.
pub fn run_bow_test(image_dir: &Path, dict_path: &Path, out_dir: &Path, cfg: &PipelineConfig) -> Result<BowTestSummary> {
    cfg.validate()?;
    let dict = VocabularyDictionary::load(dict_path)?;
    let files = store::list_tensors(image_dir)?;
    if files.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no .{} files in {}",
            store::TENSOR_EXT,
            image_dir.display()
        )));
    }
    create_dir(out_dir)?;
    let out = with_workers(cfg.workers, || build_test_bows(&files, &dict, out_dir))?;
    for id in &out.skipped {
        warn!("image {id} has no descriptors and is skipped");
    }
    Ok(BowTestSummary {
        images: out.bows.len(),
        skipped: out.skipped,
        out_dir: out_dir.to_path_buf(),
    })
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub ranked: Vec<(u32, f64)>,
}

/// Image histograms of `bow_dir`, sorted by image id.
pub fn load_image_bows(bow_dir: &Path) -> Result<Vec<(String, BowVector)>> {
    store::list_tensors(bow_dir)?
        .into_iter()
        .map(|p| Ok((store::file_id(&p), BowVector::load(&p)?)))
        .collect()
}

fn check_bow_dims(bows: &[(String, BowVector)], v: usize, what: &str) -> Result<()> {
    if let Some((id, b)) = bows.iter().find(|(_, b)| b.len() != v) {
        return Err(Error::Dimension(format!(
            "histogram {id} has shape (1, {}) but {what}",
            b.len()
        )));
    }
    Ok(())
}

fn write_predictions(out_path: &Path, ids: Vec<String>, preds: Vec<Prediction>) -> Result<()> {
    let records: Vec<PredictionRecord> = ids
        .into_iter()
        .zip(preds)
        .map(|(image_id, p)| PredictionRecord {
            image_id,
            ranked: p.ranked,
        })
        .collect();
    ensure_parent(out_path)?;
    store::write_jsonl(out_path, &records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifySummary {
    pub images: usize,
    pub categories: usize,
    pub top_k: usize,
    /// Category rows held in memory at once.
    pub chunk_rows: usize,
    pub predictions: PathBuf,
}

/// Nearest category spectra for every histogram in `bow_dir`, reading the
/// category matrix in chunks that fit `cfg.memory_budget_bytes`.
pub fn run_classify(bow_dir: &Path, matrix_path: &Path, out_path: &Path, cfg: &PipelineConfig) -> Result<ClassifySummary> {
    cfg.validate()?;
    let header = store::read_tensor_header(matrix_path)?;
    let (c, v) = header.matrix_shape();
    let bows = load_image_bows(bow_dir)?;
    check_bow_dims(&bows, v, &format!("the category matrix has shape ({c}, {v})"))?;
    let chunk = store::chunk_rows(cfg.memory_budget_bytes, v as u64, 4)?;
    let (ids, vectors): (Vec<String>, Vec<BowVector>) = bows.into_iter().unzip();
    let preds = with_workers(cfg.workers, || classify_from_file(&vectors, matrix_path, cfg.top_k, cfg.memory_budget_bytes))?;
    let images = ids.len();
    write_predictions(out_path, ids, preds)?;
    Ok(ClassifySummary {
        images,
        categories: c,
        top_k: cfg.top_k.min(c),
        chunk_rows: chunk.min(c),
        predictions: out_path.to_path_buf(),
    })
}

/// Settings for the two networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuralTrainConfig {
    pub mapper: TrainConfig,
    pub head: TrainConfig,
}

impl Default for NeuralTrainConfig {
    fn default() -> Self {
        Self {
            mapper: TrainConfig {
                learning_rate: 0.5,
                batch_size: 16,
                epochs: 20,
                seed: 42,
            },
            head: TrainConfig {
                learning_rate: 5.0,
                batch_size: 16,
                epochs: 100,
                seed: 42,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub pairs: usize,
    /// Labelled images without a histogram file (no descriptors).
    pub missing_images: Vec<String>,
    pub v: usize,
    pub c: usize,
    pub mapper_final_loss: Option<f64>,
    pub head_final_loss: Option<f64>,
    pub model_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LossTraces {
    mapper: Vec<f64>,
    head: Vec<f64>,
}

/// Train the mapper on (image histogram, category histogram) pairs and the
/// softmax head on the mapped histograms. Image histograms come from
/// `bow_dir/<image_id>.bvwt`, categories from the matrix at `matrix_path`.
pub fn run_train_neural(
    labels_path: &Path,
    bow_dir: &Path,
    matrix_path: &Path,
    model_dir: &Path,
    tcfg: &NeuralTrainConfig,
) -> Result<TrainSummary> {
    let labels: Vec<LabelRecord> = store::read_jsonl(labels_path)?;
    let matrix = CategoryBowMatrix::load(matrix_path)?;
    let v = matrix.dim();
    let row_of: HashMap<u32, usize> = matrix
        .category_ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();

    let mut inputs = Vec::new();
    let mut classes = Vec::new();
    let mut missing = Vec::new();
    for rec in &labels {
        let Some(&row) = row_of.get(&rec.category_id) else {
            return Err(Error::Label {
                label: rec.category_id as usize,
                classes: matrix.n_categories(),
            });
        };
        let path = bow_dir.join(format!("{}.{}", rec.image_id, store::TENSOR_EXT));
        if !path.exists() {
            missing.push(rec.image_id.clone());
            continue;
        }
        let bow = BowVector::load(&path)?;
        if bow.len() != v {
            return Err(Error::Dimension(format!(
                "histogram {} has shape (1, {}) but the category matrix has shape ({}, {v})",
                rec.image_id,
                bow.len(),
                matrix.n_categories()
            )));
        }
        inputs.push(bow.values().to_vec());
        classes.push(row);
    }
    if !missing.is_empty() {
        warn!("{} labelled images have no histogram", missing.len());
    }
    let targets: Vec<Vec<f64>> = (0..matrix.n_categories())
        .map(|i| matrix.row_bow(i).values().to_vec())
        .collect();
    let pairs: Vec<(&[f64], &[f64])> = inputs
        .iter()
        .zip(&classes)
        .map(|(x, &c)| (&x[..], &targets[c][..]))
        .collect();
    let mapper = train_mapper(&pairs, &tcfg.mapper)?;
    let mapped = inputs
        .iter()
        .map(|x| mapper_forward(&mapper.model, x))
        .collect::<Result<Vec<_>>>()?;
    let mapped_refs: Vec<&[f64]> = mapped.iter().map(|x| &x[..]).collect();
    let head = train_head(&mapped_refs, &classes, matrix.category_ids().to_vec(), &tcfg.head)?;

    let model = NeuralModel {
        meta: ModelMeta {
            v,
            c: matrix.n_categories(),
            seed: tcfg.mapper.seed,
            epochs: tcfg.mapper.epochs,
            final_loss: mapper.final_loss(),
            head_final_loss: head.final_loss(),
            category_ids: matrix.category_ids().to_vec(),
        },
        mapper: mapper.model,
        head: head.model,
    };
    model.save(model_dir)?;
    let traces = LossTraces {
        mapper: mapper.loss_trace,
        head: head.loss_trace,
    };
    write_json(&model_dir.join("loss_trace.json"), &traces)?;
    Ok(TrainSummary {
        pairs: pairs.len(),
        missing_images: missing,
        v,
        c: model.meta.c,
        mapper_final_loss: model.meta.final_loss,
        head_final_loss: model.meta.head_final_loss,
        model_dir: model_dir.to_path_buf(),
    })
}

/// Pretty-printed JSON, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Parameter(format!("cannot encode {}: {e}", path.display())))?;
    ensure_parent(path)?;
    store::write_atomic(path, |w| {
        w.write_all(&bytes)?;
        w.write_all(b"\n")
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictSummary {
    pub images: usize,
    pub top_k: usize,
    pub predictions: PathBuf,
}

pub fn run_predict_neural(model_dir: &Path, bow_dir: &Path, out_path: &Path, top_k: usize) -> Result<PredictSummary> {
    let model = NeuralModel::load(model_dir)?;
    let bows = load_image_bows(bow_dir)?;
    check_bow_dims(
        &bows,
        model.meta.v,
        &format!("the model expects (1, {})", model.meta.v),
    )?;
    let preds = bows
        .par_iter()
        .map(|(_, b)| model.predict(b.values(), top_k))
        .collect::<Result<Vec<_>>>()?;
    let images = bows.len();
    write_predictions(out_path, bows.into_iter().map(|(id, _)| id).collect(), preds)?;
    Ok(PredictSummary {
        images,
        top_k: top_k.min(model.meta.c),
        predictions: out_path.to_path_buf(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KAccuracy {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub top_k: Vec<KAccuracy>,
}

/// Top-k accuracy of a predictions file against a labels file. Both are
/// sorted by image id and must list exactly the same images.
pub fn evaluate(predictions_path: &Path, labels_path: &Path, ks: &[usize]) -> Result<EvalReport> {
    let mut preds: Vec<PredictionRecord> = store::read_jsonl(predictions_path)?;
    let mut labels: Vec<LabelRecord> = store::read_jsonl(labels_path)?;
    preds.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    labels.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let n = preds.len().max(labels.len());
    for i in 0..n {
        let p = preds.get(i).map(|r| r.image_id.as_str());
        let l = labels.get(i).map(|r| r.image_id.as_str());
        if p != l {
            return Err(Error::Parameter(format!(
                "predictions and labels are misaligned at sorted position {i}: prediction {} vs label {}",
                p.unwrap_or("<none>"),
                l.unwrap_or("<none>")
            )));
        }
    }
    let predictions: Vec<Prediction> = preds.into_iter().map(|r| Prediction { ranked: r.ranked }).collect();
    let truth: Vec<u32> = labels.iter().map(|l| l.category_id).collect();
    let top_k = ks
        .iter()
        .map(|&k| {
            Ok(KAccuracy {
                k,
                accuracy: top_k_accuracy(&predictions, &truth, k)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        images: truth.len(),
        top_k,
    })
}
