//! Pipeline hyperparameters and their flat `key = value` file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DetectionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Per-category reservoir size.
    pub sample_cap: usize,
    pub k_per_category: usize,
    pub vocab_size: usize,
    pub image_size: u32,
    pub memory_budget_bytes: u64,
    pub batch_size: usize,
    /// Mini-batch iterations, for both clustering stages.
    pub iterations: usize,
    pub seed: u64,
    pub workers: usize,
    pub top_k: usize,
    pub detection_threshold: f64,
    pub max_keypoints: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sample_cap: 10_000,
            k_per_category: 50,
            vocab_size: 10_000,
            image_size: 512,
            memory_budget_bytes: 1 << 31,
            batch_size: 1024,
            iterations: 500,
            seed: 42,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            top_k: 5,
            detection_threshold: DetectionConfig::default().threshold,
            max_keypoints: DetectionConfig::default().max_keypoints,
        }
    }
}

/// Every key optional; used for config files and command-line overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub sample_cap: Option<usize>,
    pub k_per_category: Option<usize>,
    pub vocab_size: Option<usize>,
    pub image_size: Option<u32>,
    pub memory_budget_bytes: Option<u64>,
    pub batch_size: Option<usize>,
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub top_k: Option<usize>,
    pub detection_threshold: Option<f64>,
    pub max_keypoints: Option<usize>,
}

impl ConfigOverrides {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            line: e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0),
            reason: e.message().to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl PipelineConfig {
    pub fn apply(&mut self, o: &ConfigOverrides) {
        macro_rules! take {
            ($($f:ident),*) => {$( if let Some(v) = o.$f { self.$f = v; } )*};
        }
        take!(
            sample_cap,
            k_per_category,
            vocab_size,
            image_size,
            memory_budget_bytes,
            batch_size,
            iterations,
            seed,
            workers,
            top_k,
            detection_threshold,
            max_keypoints
        );
    }

    /// Defaults, then the config file, then explicit overrides.
    pub fn resolve(file: Option<&ConfigOverrides>, flags: &ConfigOverrides) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply(f);
        }
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("sample_cap", self.sample_cap as u64),
            ("k_per_category", self.k_per_category as u64),
            ("vocab_size", self.vocab_size as u64),
            ("image_size", self.image_size as u64),
            ("memory_budget_bytes", self.memory_budget_bytes),
            ("batch_size", self.batch_size as u64),
            ("iterations", self.iterations as u64),
            ("workers", self.workers as u64),
            ("top_k", self.top_k as u64),
            ("max_keypoints", self.max_keypoints as u64),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be at least 1")));
            }
        }
        if !(self.detection_threshold >= 0.0) {
            return Err(Error::Parameter("detection_threshold must be non-negative".into()));
        }
        Ok(())
    }

    pub fn detection(&self) -> DetectionConfig {
        DetectionConfig {
            threshold: self.detection_threshold,
            max_keypoints: self.max_keypoints,
        }
    }
}
