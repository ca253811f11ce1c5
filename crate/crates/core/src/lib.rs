//! Indicator-controlled latent diffusion for image composition.

pub mod data;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod geometry;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
pub use geometry::BoundingBox;
