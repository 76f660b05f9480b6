//! Evaluation harness for frozen patch-token encoders on fruit perception tasks.
//!
//! The pipeline runs from annotation normalization ([`dataset`]) through cached
//! patch features ([`encoder`]), lightweight patch-grid decoders ([`decoders`]) trained
//! by [`training`], post-processing ([`postprocess`]) and evaluation ([`metrics`]).
//! [`cluster`] adds fruit-evidence verification of cluster proposals, and [`viz`]
//! produces PCA maps, overlays and metric tables.

pub mod cluster;
pub mod dataset;
pub mod decoders;
pub mod encoder;
pub mod geometry;
pub mod mask;
pub mod metrics;
pub mod postprocess;
pub mod tensor;
pub mod synth;
pub mod training;
pub mod viz;

/// Side length of one patch in pixels. All supported encoders use 16×16 patches.
pub const PATCH_SIZE: usize = 16;
