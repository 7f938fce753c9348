//! Multi-sensor masked autoencoding for remote sensing imagery.
//!
//! Bands are patchified at their own ground sampling distance, projected
//! per band, pooled per spectral group and encoded by a transformer. Coarse
//! groups receive positional encodings averaged over the fine patches they
//! cover, so tokens from different sensors share one geospatial frame.

pub mod checkpoint;
pub mod data;
pub mod encodings;
pub mod error;
pub mod geometry;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod patch_embed;
pub mod training;

pub use error::{Result, UsatError};
pub use geometry::{BandKey, BandSubset, GeometryConfig};
pub use model::{Model, ModelConfig, Preset};
