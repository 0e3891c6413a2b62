//! Weakly-supervised ISUP grading of prostate biopsy slides.
//!
//! The pipeline has three learned stages: a hybrid instance/bag MIL classifier
//! that pseudo-labels patches from slide-level Gleason grades, a stain-agnostic
//! teacher-student pre-training of a patch encoder on a class-balanced patch
//! corpus, and an attention-MIL head fine-tuned with cumulative ordinal targets.

pub mod error;
pub mod grader;
pub mod grade;
pub mod metrics;
pub mod mil;
pub mod nn;
pub mod pipeline;
pub mod record;
pub mod report;
pub mod ssl;
pub mod stain;
pub mod synth;
pub mod tiling;

pub use error::{Error, Result};
