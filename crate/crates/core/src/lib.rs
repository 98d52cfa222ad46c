//! Out-of-core bag-of-visual-words toolkit.
//!
//! The crate builds a large visual vocabulary from per-category descriptor
//! sets while keeping peak memory bounded, turns descriptor sets into
//! normalized word histograms ("spectra"), and classifies images either by
//! nearest category spectrum under squared L2 or with a linear mapper
//! followed by a softmax head.
//!
//! Stages, in pipeline order:
//!
//! - [`imaging`]: grayscale conversion, histogram equalization, resize.
//! - [`features`]: integral images, box-filter Hessian keypoints and 64-d
//!   upright descriptors.
//! - [`clustering`]: k-means++ seeding, Lloyd's k-means and mini-batch k-means.
//! - [`vocabulary`]: reservoir sampling, per-category codebooks, merging and
//!   the second-stage reduction.
//! - [`bow`]: category and image histograms against the dictionary.
//! - [`classify`]: chunked nearest-spectrum search and accuracy metrics.
//! - [`neural`]: the mapper/softmax two-network classifier.
//! - [`store`]: tensor files, manifests and memory-budget arithmetic.
//! - [`pipeline`]: stage drivers shared by the command-line tool.

pub mod bow;
pub mod classify;
pub mod clustering;
pub mod config;
mod error;
pub mod features;
pub mod imaging;
mod matrix;
pub mod neural;
pub mod pipeline;
pub mod store;
pub mod synth;
pub mod vocabulary;

pub use error::{Error, Result};
pub use matrix::Matrix;

pub use bow::{BowVector, CategoryBowMatrix};
pub use classify::Prediction;
pub use clustering::{Centroids, KMeansConfig};
pub use config::PipelineConfig;
pub use features::{DescriptorSet, IntegralImage, Keypoint};
pub use imaging::RasterImage;
pub use neural::{LinearMapper, SoftmaxHead, TrainConfig};
pub use vocabulary::{CategoryCodebook, VocabularyDictionary};

/// Length of every local descriptor.
pub const DESCRIPTOR_DIM: usize = 64;
