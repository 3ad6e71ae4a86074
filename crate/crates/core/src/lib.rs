//! Soft-label training toolkit: synthetic ambiguous-image data, annotation
//! simulation and aggregation, a small CNN trained on soft targets,
//! distribution-aware metrics and t-SNE embeddings of learned features.

pub mod embed;
pub mod error;
pub mod labelkit;
pub mod metrics;
pub mod nnet;
pub mod pipeline;
pub mod rng;
pub mod synthgen;

pub use error::{Error, ErrorClass, Result};
pub use labelkit::{AnnotationSet, HardLabel, SoftLabel};
