//! Test-time prompt tuning calibration lab.
//!
//! Operates on feature bundles exported from a contrastive vision-language
//! model (or synthesized), with the text encoder linearized around the
//! initial prompt: `t_c(p) = normalize(t_c0 + J_c p)`. On top of that the
//! crate provides four test-time objectives (TPT, C-TPT, O-TPT, D-TPT),
//! an episodic AdamW adaptation loop, calibration metrics, and the
//! dominant-dimension / modality-gap diagnostics.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod analysis;
pub mod cli;
pub mod error;
pub mod feature_model;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod objectives;

pub use adaptation::{adamw_step, adapt_sample, run_dataset, AdaptConfig, PredictionRecord};
pub use error::{Error, Result};
pub use feature_model::{FeatureBundle, PromptState, Sample, TextFeatureSet};
pub use metrics::{BinStat, CalibrationReport};
pub use objectives::{LossBreakdown, Method};
