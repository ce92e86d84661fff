//! A from-scratch CNN engine built around a multi-kernel spatial attention
//! block, with fuzzy max fusion of homogeneous ensembles.
//!
//! Tensors are NHWC `f32`/`f64`; every layer has a hand-derived backward pass.

// validation is written as `!(x > 0.0)` on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod image;
pub mod metrics;
pub mod mlsam;
pub mod model;
pub mod nn;
mod parallel;
pub mod seeds;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use config::{ModelConfig, RunConfig};
pub use ensemble::{fused_scores, fuzzy_max_fuse, EnsembleModel, FusionParams};
pub use error::{Error, Result};
pub use metrics::{classification_metrics, ConfusionMatrix, MetricsReport};
pub use mlsam::MlsamBlock;
pub use model::TFusionModel;
pub use seeds::SeedPlan;
pub use tensor::{Scalar, Tensor};
pub use training::{stratified_split, AdamState, History, TrainConfig};
