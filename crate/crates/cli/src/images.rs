//! Decoding and the two image stages. Inputs are laid out as
//! `<category_id>/<image>`.

use std::path::{Path, PathBuf};

use bovw_core::imaging::{preprocess, to_grayscale, ChannelPlane};
use bovw_core::pipeline::with_workers;
use bovw_core::store::{self, LabelRecord, ManifestRecord};
use bovw_core::{features, Error, PipelineConfig, RasterImage, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

pub const DESCRIPTOR_DIR: &str = "descriptors";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";

#[derive(Debug, Clone)]
pub struct ImageEntry {
    pub category_id: u32,
    /// Name of the category directory, kept verbatim as the label.
    pub category_dir: String,
    pub path: PathBuf,
}

impl ImageEntry {
    fn stem(&self) -> String {
        store::file_id(&self.path)
    }

    pub fn image_id(&self) -> String {
        format!("{:05}_{}", self.category_id, self.stem())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = e.map_err(|e| io_err(dir, e))?.path();
        let hidden = p
            .file_name()
            .is_some_and(|n| n.to_string_lossy().starts_with('.'));
        if !hidden {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Every file under a numeric category directory, sorted by category then
/// file name. Non-numeric directories are skipped with a warning.
pub fn list_dataset(root: &Path) -> Result<Vec<ImageEntry>> {
    let mut out = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let Ok(category_id) = name.parse::<u32>() else {
            warn!("skipping {}: directory name is not a category id", dir.display());
            continue;
        };
        for path in sorted_entries(&dir)? {
            if path.is_file() {
                out.push(ImageEntry {
                    category_id,
                    category_dir: name.clone(),
                    path,
                });
            }
        }
    }
    out.sort_by(|a, b| (a.category_id, &a.path).cmp(&(b.category_id, &b.path)));
    Ok(out)
}

/// Decode any supported format to 8-bit luma.
pub fn decode(path: &Path) -> std::result::Result<RasterImage, String> {
    let rgb = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let n = (w * h) as usize;
    let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for px in rgb.pixels() {
        for (plane, &v) in planes.iter_mut().zip(&px.0) {
            plane.push(v);
        }
    }
    let plane = |data| ChannelPlane {
        width: w,
        height: h,
        data,
    };
    to_grayscale(plane(&planes[0]), plane(&planes[1]), plane(&planes[2])).map_err(|e| e.to_string())
}

fn save_png(img: &RasterImage, path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width(), img.height(), img.pixels().to_vec())
        .expect("pixel buffer matches dimensions");
    buf.save(path).map_err(|e| io_err(path, std::io::Error::other(e)))
}

#[derive(Debug, Clone, Serialize)]
pub struct PreprocessSummary {
    pub processed: usize,
    pub failed: usize,
    pub failures: Vec<PathBuf>,
}

fn no_images(root: &Path) -> Error {
    Error::InsufficientData(format!("no decodable images under {}", root.display()))
}

pub fn run_preprocess(input: &Path, output: &Path, cfg: &PipelineConfig) -> Result<PreprocessSummary> {
    let entries = list_dataset(input)?;
    let results: Vec<Result<bool>> = with_workers(cfg.workers, || {
        Ok(entries
            .par_iter()
            .map(|e| {
                let img = match decode(&e.path) {
                    Ok(img) => img,
                    Err(reason) => {
                        warn!("cannot decode {}: {reason}", e.path.display());
                        return Ok(false);
                    }
                };
                let dir = output.join(&e.category_dir);
                std::fs::create_dir_all(&dir).map_err(|err| io_err(&dir, err))?;
                save_png(&preprocess(&img, cfg.image_size)?, &dir.join(format!("{}.png", e.stem())))?;
                Ok(true)
            })
            .collect())
    })?;
    let mut summary = PreprocessSummary {
        processed: 0,
        failed: 0,
        failures: Vec::new(),
    };
    for (e, r) in entries.iter().zip(results) {
        if r? {
            summary.processed += 1;
        } else {
            summary.failed += 1;
            summary.failures.push(e.path.clone());
        }
    }
    if summary.processed == 0 {
        return Err(no_images(input));
    }
    info!("preprocessed {} images, {} failed", summary.processed, summary.failed);
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractSummary {
    pub images: usize,
    pub failed: usize,
    pub failures: Vec<PathBuf>,
    /// Images in which no keypoint survived.
    pub empty: Vec<String>,
    pub descriptors: u64,
    pub manifest: PathBuf,
    pub labels: PathBuf,
}

/// Descriptors for every image go to `<output>/descriptors/<image_id>.bvwt`,
/// alongside a category manifest and per-image labels.
pub fn run_extract(input: &Path, output: &Path, cfg: &PipelineConfig) -> Result<ExtractSummary> {
    let entries = list_dataset(input)?;
    let desc_dir = output.join(DESCRIPTOR_DIR);
    std::fs::create_dir_all(&desc_dir).map_err(|e| io_err(&desc_dir, e))?;
    let detection = cfg.detection();
    let counts: Vec<Result<Option<usize>>> = with_workers(cfg.workers, || {
        Ok(entries
            .par_iter()
            .map(|e| {
                let img = match decode(&e.path) {
                    Ok(img) => img,
                    Err(reason) => {
                        warn!("cannot decode {}: {reason}", e.path.display());
                        return Ok(None);
                    }
                };
                let set = features::extract(&img, &detection);
                set.save(desc_dir.join(format!("{}.{}", e.image_id(), store::TENSOR_EXT)))?;
                Ok(Some(set.len()))
            })
            .collect())
    })?;

    let mut records: Vec<ManifestRecord> = Vec::new();
    let mut labels = Vec::new();
    let mut summary = ExtractSummary {
        images: 0,
        failed: 0,
        failures: Vec::new(),
        empty: Vec::new(),
        descriptors: 0,
        manifest: output.join(MANIFEST_FILE),
        labels: output.join(LABELS_FILE),
    };
    for (e, n) in entries.iter().zip(counts) {
        let Some(n) = n? else {
            summary.failed += 1;
            summary.failures.push(e.path.clone());
            continue;
        };
        let id = e.image_id();
        if n == 0 {
            summary.empty.push(id.clone());
        }
        summary.images += 1;
        summary.descriptors += n as u64;
        if !matches!(records.last(), Some(r) if r.category_id == e.category_id) {
            records.push(ManifestRecord {
                category_id: e.category_id,
                label: e.category_dir.clone(),
                descriptor_paths: Vec::new(),
                codebook_path: None,
                bow_path: None,
                n_descriptors: 0,
            });
        }
        let rec = records.last_mut().expect("just pushed");
        rec.descriptor_paths
            .push(Path::new(DESCRIPTOR_DIR).join(format!("{id}.{}", store::TENSOR_EXT)));
        rec.n_descriptors += n as u64;
        labels.push(LabelRecord {
            image_id: id,
            category_id: e.category_id,
        });
    }
    if summary.images == 0 {
        return Err(no_images(input));
    }
    store::write_manifest(&summary.manifest, &records)?;
    store::write_jsonl(&summary.labels, &labels)?;
    if !summary.empty.is_empty() {
        warn!("{} images produced no descriptors", summary.empty.len());
    }
    Ok(summary)
}
