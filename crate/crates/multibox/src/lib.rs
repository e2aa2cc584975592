//! Class-agnostic multibox detection, end to end and framework-free.
//!
//! The crate predicts a fixed set of K bounding boxes plus per-box
//! confidences from an image crop, trains that predictor with a
//! bipartite-matching loss (each ground-truth box is assigned to exactly
//! one prediction slot), and post-processes with non-maximum suppression.
//! Around the core it provides k-means box priors with residual encoding,
//! a synthetic-scene generator for experiments, detection metrics, and a
//! small command-line pipeline.
//!
//! Modules:
//! - [`geometry`]: normalized boxes, Jaccard overlap, crop remapping.
//! - [`loss`]: optimal assignment and the matching + confidence loss with
//!   exact gradients.
//! - [`priors`]: k-means box priors and residual encoding.
//! - [`predictor`]: a small MLP over pixels with Adagrad training.
//! - [`postprocess`]: non-maximum suppression and multi-crop inference.
//! - [`evalkit`]: detection-rate curves, average precision, detection@k.
//! - [`datagen`]: synthetic scenes, crop sampling, classifier crops.
//! - [`gradcheck`]: finite-difference gradient estimation.
//! - [`cli`]: the `multibox` command-line pipeline.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod postprocess;
pub mod predictor;
pub mod priors;

pub use error::{MultiboxError, Result};
pub use geometry::NormBox;
