//! Attention analytics for slide-reading telemetry.
//!
//! The crate turns viewport logs into attention heatmaps, compares maps with
//! saliency metrics, relates attention agreement to grading concordance, and
//! trains two small networks on top of frozen patch features: a transformer
//! that predicts attention maps and a convolutional expertise classifier.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod heatmap;
pub mod metrics;
pub mod models;
pub mod synth;
pub mod telemetry;
pub mod tensor;
pub mod training;
pub mod util;

pub use heatmap::{GridSpec, Heatmap, Norm};
pub use models::{ModelConfig, ModelParams};
pub use telemetry::{Expertise, FeatureGrid, GradeDomain, GradePair, Session, ViewportSample};
pub use training::{CohortFilter, HyperParams};
