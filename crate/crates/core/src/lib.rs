//! Semantically decomposed neural implicit RGB-D SLAM.
//!
//! A scene is represented by a shared multiresolution hash grid and one small
//! occupancy network per semantic class, rendered with differentiable volume
//! integration and optimized jointly with camera poses.

pub mod cli;
pub mod data;
pub mod diffnet;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod loss;
pub mod render;
pub mod slam;

pub use error::{Error, Result};
