//! Multimodal copy detection for text-to-image models, plus region-aware
//! prompt augmentation for training-time caption diversification.
//!
//! The detector fuses three per-image descriptors (patch-level visual,
//! global semantic, texture) with a small attention encoder and applies a
//! two-threshold rule: a copy gate on the fused cosine similarity and a
//! retrieve/style split on a weighted combination of the per-stream
//! similarities. Pretrained backbones plug in through [`features::EmbedderBackend`]
//! and [`rapta::DetectorBackend`]; a deterministic synthetic embedder ships
//! as the built-in backend.

pub mod calibration;
pub mod cli;
pub mod decision;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gallery;
pub mod image;
pub mod perturb;
pub mod rapta;
mod seeding;

pub use error::{Error, Result};
pub use image::ImageBuffer;
