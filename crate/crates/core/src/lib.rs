//! Bias-tuning of a text-promptable segmentation transformer.
//!
//! The image encoder is frozen except for additive shifts on every affine
//! layer, its layer norms and its positional embedding. A small text affine
//! layer maps frozen label embeddings into the prompt space, and the mask
//! decoder is trained in full.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod ops;
pub mod raster;
pub mod scalar;
pub mod tuning;

pub use checkpoint::DeltaCheckpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{MaskLogits, Model, ModelConfig};
pub use raster::{BinaryMask, Image};
pub use scalar::Scalar;

pub type ModelF32 = Model<f32>;
pub type ModelF64 = Model<f64>;
pub type MaskLogitsF32 = MaskLogits<f32>;
pub type MaskLogitsF64 = MaskLogits<f64>;
