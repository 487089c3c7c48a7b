//! Object-level self-supervised representation learning from scene images.
//!
//! The pipeline runs in three stages: image-level dual-network pretraining,
//! discovery of corresponding object regions across nearest-neighbor images
//! (region proposals, embeddings, retrieval), and object-level training on
//! the discovered pairs.

pub mod embedding;
pub mod error;
pub mod geometry;
pub mod imageio;
pub mod retrieval;
pub mod rng;
pub mod segmentation;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
