//! Frames, the synthetic scene oracle and dataset ingestion.

mod dataset;
mod scene;
mod tum;

pub use dataset::{load_dataset, write_dump, write_frame_dump, write_intrinsics, Dataset, Layout};
pub use scene::{orbit_trajectory, toy_intrinsics, toy_sequence, Hit, Light, Orbit, Primitive, Room, Shape, SyntheticScene};
pub use tum::{format_sig9, read_tum, write_tum, TrajectoryEntry};

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Label of pixels without semantic annotation.
pub const UNLABELED: u16 = u16::MAX;

/// One RGB-D frame with semantic labels. Images are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub width: usize,
    pub height: usize,
    /// `[h][w][3]` in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// z-depth in metres, 0 for holes.
    pub depth: Vec<f64>,
    pub semantic: Vec<u16>,
    pub gt_pose: Option<Pose>,
}

impl Frame {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            index: 0,
            timestamp: 0.0,
            width,
            height,
            rgb: vec![0.0; width * height * 3],
            depth: vec![0.0; width * height],
            semantic: vec![UNLABELED; width * height],
            gt_pose: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if n == 0 || self.rgb.len() != 3 * n || self.depth.len() != n || self.semantic.len() != n {
            return Err(Error::Shape(format!("frame {} has inconsistent image sizes", self.index)));
        }
        if self.depth.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidDepth(
                *self.depth.iter().find(|d| !(d.is_finite() && **d >= 0.0)).unwrap(),
            ));
        }
        if self.rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Shape(format!("frame {} has colors outside [0, 1]", self.index)));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn color_at(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// `None` for holes.
    pub fn depth_at(&self, x: usize, y: usize) -> Option<f64> {
        Some(self.depth[y * self.width + x]).filter(|d| *d > 0.0)
    }

    pub fn class_at(&self, x: usize, y: usize) -> u16 {
        self.semantic[y * self.width + x]
    }

    pub fn classes_present(&self) -> BTreeSet<u16> {
        self.semantic.iter().copied().collect()
    }

    /// Rounds depth to whole millimetres and colors to 8 bits, the precision
    /// of the dump format.
    pub fn quantize(&mut self) {
        self.depth.iter_mut().for_each(|d| *d = (*d * 1000.0).round() / 1000.0);
        self.rgb.iter_mut().for_each(|c| *c = (*c * 255.0).round() / 255.0);
    }

    /// Adds seeded zero-mean Gaussian noise to valid depths.
    pub fn add_depth_noise(&mut self, std: f64, rng: &mut impl Rng) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("depth noise: {e}")))?;
        for d in self.depth.iter_mut().filter(|d| **d > 0.0) {
            *d = (*d + normal.sample(rng)).max(0.0);
        }
        Ok(())
    }
}
