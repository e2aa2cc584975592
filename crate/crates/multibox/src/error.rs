//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the multibox pipeline.
#[derive(Debug, Error)]
pub enum MultiboxError {
    /// More ground-truth boxes than prediction slots; the assignment
    /// constraint (every ground truth claimed exactly once) is unsatisfiable.
    #[error("infeasible match: {ground_truth} ground-truth boxes but only {predictions} prediction slots")]
    InfeasibleMatch {
        predictions: usize,
        ground_truth: usize,
    },

    /// Prior-matching mode was requested without a prior set.
    #[error("prior matching requested but no priors were supplied")]
    MissingPriors,

    /// A vector or matrix dimension disagrees with the declared topology.
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    /// Fewer input boxes than requested clusters.
    #[error("cannot fit {k} priors from {boxes} boxes")]
    TooFewBoxes { boxes: usize, k: usize },

    /// A classifier label outside `0..=num_classes`.
    #[error("label {label} out of range (max {max})")]
    LabelOutOfRange { label: usize, max: usize },

    /// Average precision is undefined when a class has no ground truth.
    #[error("average precision undefined: no ground truth{}", match .class { Some(c) => format!(" for class {c}"), None => String::new() })]
    ZeroGroundTruth { class: Option<usize> },

    /// detection@k input had two boxes for the same class in one image.
    #[error("duplicate class {class} in top-k pairs for image {image_id}")]
    DuplicateClassInTopK { image_id: u64, class: usize },

    /// An `Assignment` violating the exactly-once claiming constraint.
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    /// A configuration value failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A file had a malformed header or record.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MultiboxError>;
