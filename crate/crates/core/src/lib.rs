//! Modality-agnostic multi-modal semantic segmentation.
//!
//! A shared encoder turns each sensor image into a feature map. The
//! aggregation module fuses whatever modalities are present into one
//! semantic feature, and a segmentation head predicts per-pixel classes.
//! During training a selection step ranks modalities by similarity to the
//! fused feature, fuses the most and least similar pair with a second
//! aggregator, and regularizes the remaining ones with a consistency loss.
//! At inference any non-empty subset of the training modalities can be used.

mod binio;
#[cfg(test)]
mod testutil;

pub mod asm;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod mam;
pub mod modality;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{MagicError, Result};
pub use modality::{Modality, ModalitySet};
pub use model::{MagicModel, ModelConfig};
