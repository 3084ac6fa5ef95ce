//! Knowledge distillation for Vision Transformers with three objectives:
//! logit-matching KD, contrastive alignment against a live teacher's CLS
//! embeddings, and contrastive alignment against a precomputed table of
//! class-averaged teacher embeddings.
//!
//! The model is a small pre-norm ViT with hand-written reverse-mode
//! gradients, generic over `f32` (training default) and `f64` (gradient
//! checks and bit-exact reproducibility).

mod binio;
pub mod cli;
pub mod config;
pub mod data;
pub mod embed_cache;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod real;
pub mod trainer;

pub use config::{DatasetSpec, ExperimentConfig, LossSettings, Mode, Precision, StudentSpec, TeacherSpec};
pub use data::{Batch, Dataset, Image};
pub use embed_cache::EmbeddingCache;
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights, ProjectionWeights, TargetMatrix};
pub use metrics::{ResourceProfile, TrackingAllocator};
pub use model::{EncoderOutput, ModelConfig, ModelWeights};
pub use real::Real;
pub use trainer::{EpochRecord, TrainingReport};
