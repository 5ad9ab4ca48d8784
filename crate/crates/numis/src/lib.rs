//! Weakly-supervised recognition of semantic elements on coin photographs.
//!
//! The pipeline turns a corpus of two-sided coin images with free-text
//! descriptions into labeled reverse-side crops, trains Vision-Transformer
//! and CNN classifiers per concept, and explains predictions with
//! perturbation-based saliency maps. See the `numis` binary for the
//! stage-by-stage CLI.

pub mod cnn;
pub mod dataset;
pub mod pipeline;
pub mod saliency;
pub mod segment;
pub mod synthetic;
pub mod tensor;
pub mod testutil;
pub mod textmine;
pub mod train;
pub mod vit;
