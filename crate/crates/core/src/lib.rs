//! Temporal cost-volume occupancy engine.
//!
//! Voxel features from the current frame are refined with weights learned
//! from a cost volume: points sampled along each voxel's line of sight are
//! projected into past frames, where parallax separates true surfaces from
//! features smeared along the ray.

pub mod cost_volume;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod occupancy;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
