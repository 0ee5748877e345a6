//! Oriented-bounding-box prompted instance segmentation at desk scale.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod field;
pub mod geometry;
pub mod io;
pub mod params;
pub mod model;
pub mod obt;
pub mod prompt_encoder;
pub mod smoothing;
pub mod train;

pub use error::{Error, Result};
