//! Embedding- and prediction-level consistency regularization for face
//! anti-spoofing: dense Siamese encoder, dense-similarity objective,
//! semi-supervised protocol splits, biometric metrics and a deterministic
//! trainer.

pub mod augment;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
