//! Shared domain types and the dataset pipeline for plume-dispersion
//! surrogate experiments.
//!
//! The central payload is [`ConcentrationSequence`]: a time-ordered stack of
//! 3D concentration grids with spatial and temporal metadata. This crate
//! turns raw simulation sequences into paired low/high-resolution training
//! tensors (crop, resize, pooling, log-normalization, sliding windows,
//! splits) and defines the on-disk run container and corpus manifest.

pub mod blob;
pub mod container;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod types;

pub use error::CoreError;
pub use types::{
    ConcentrationSequence, DualResolutionSample, NormalizationSpec, SlidingWindow, SourceSpec,
    WindCondition,
};
