//! Metric-embedding learning with batch-hard triplet loss, a split-latent
//! autoencoder (identity code + nuisance code) over backbone features, and
//! unsupervised cross-camera fine-tuning, together with the Rank-1 / mAP
//! re-identification scoring protocol.
//!
//! The crate never touches pixels. Backbone features come from a
//! [`providers`] implementation: either the seeded synthetic cross-camera
//! generator or precomputed feature files.

pub mod distance;
pub mod error;
pub mod eval;
pub mod harness;
pub mod loss;
pub mod model;
pub mod providers;
pub mod sampling;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use types::{Dataset, EmbeddingVector, ImageRecord, RngSeed};
