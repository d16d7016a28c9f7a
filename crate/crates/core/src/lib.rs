//! Conditional denoising diffusion on small image patches.
//!
//! The crate trains a denoiser conditioned on a continuous class score in
//! `[0, 1]`, samples fixed-noise condition sweeps, edits real patches by
//! partial forward diffusion, and validates generations with an ensemble of
//! binary classifiers. A procedural toy dataset stands in for slide imagery
//! so every stage can be exercised on a desktop CPU.

pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod nn;
pub mod stats;
pub mod sweep;

pub use error::{Error, Result};
pub use image::ImagePatch;
