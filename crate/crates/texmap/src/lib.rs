//! Texture-code mapping pipeline.
//!
//! The crate turns grayscale textures into circular local-binary-pattern
//! code images, embeds the code alphabet into a low-dimensional space via
//! a transport-style code dissimilarity and classical MDS, renders images
//! in that embedded space ("mapped images"), and trains a small two-stream
//! convolutional network that fuses the RGB and mapped views. An evaluation
//! harness with stratified repeated splits and a synthetic texture
//! generator round out the pipeline.

pub mod dataset;
pub mod emd;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod image;
pub mod lbp;
pub mod mapped;
pub mod net;
mod seed;
pub mod svm;
pub mod synth;

pub use error::{Error, Result};
