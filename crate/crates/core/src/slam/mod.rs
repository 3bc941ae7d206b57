//! Tracking and mapping loop.

mod map;
mod select;
mod track;

pub use map::{checkpoint_state, run_slam, Mapper, MapReport, RunOptions, SlamOutput};
pub use select::{
    frustum_overlap, sample_class_pixels, sample_frame_pixels, sample_mapping_pixels, sample_uniform_pixels,
    select_ba_frames, select_reference_frames, stratum_sizes, BaMode, KeyframeDb, PixelSample, Stratum,
    OVERLAP_THRESHOLD,
};
pub use track::{track_frame, track_from, TrackResult};

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::loss::{LossBreakdown, LossWeights, PixelTargets};
use crate::render::{sample_ray, RaySamples, SamplingConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlamConfig {
    pub track_iters: usize,
    pub map_iters: usize,
    pub ba_every: usize,
    pub keyframe_every: usize,
    pub window: usize,
    pub pixels_track: usize,
    pub pixels_map: usize,
    pub init_iters: usize,
    pub new_class_iters: usize,
    /// Learning rate of the network weights.
    pub lr_params: f64,
    /// Learning rate of the hash-grid features.
    pub lr_grid: f64,
    pub lr_pose_track: f64,
    pub lr_pose_map: f64,
    pub sampling: SamplingConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Record per-iteration loss terms.
    pub diagnostics: bool,
    /// Save a checkpoint every this many frames (0 disables).
    pub checkpoint_every: usize,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            track_iters: 30,
            map_iters: 100,
            ba_every: 5,
            keyframe_every: 30,
            window: 5,
            pixels_track: 500,
            pixels_map: 2000,
            init_iters: 500,
            new_class_iters: 100,
            lr_params: 0.005,
            lr_grid: 0.02,
            lr_pose_track: 0.001,
            lr_pose_map: 0.0005,
            sampling: SamplingConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            diagnostics: true,
            checkpoint_every: 0,
        }
    }
}

impl SlamConfig {
    /// Settings for the small synthetic scene: fewer rays and samples.
    pub fn toy() -> Self {
        Self {
            keyframe_every: 5,
            pixels_track: 200,
            pixels_map: 400,
            sampling: SamplingConfig {
                surface_samples: 10,
                free_samples: 16,
                truncation: 0.10,
                near: 0.1,
                far: 4.5,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("track_iters", self.track_iters),
            ("map_iters", self.map_iters),
            ("ba_every", self.ba_every),
            ("keyframe_every", self.keyframe_every),
            ("pixels_track", self.pixels_track),
            ("pixels_map", self.pixels_map),
            ("init_iters", self.init_iters),
            ("new_class_iters", self.new_class_iters),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.window < 3 {
            return Err(Error::Config("window must be at least 3".into()));
        }
        let rates = [self.lr_params, self.lr_grid, self.lr_pose_track, self.lr_pose_map];
        if rates.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.sampling.validate()?;
        self.weights.validate()?;
        if (self.sampling.truncation - self.weights.truncation).abs() > 1e-12 {
            return Err(Error::Config("sampling and loss truncation distances differ".into()));
        }
        Ok(())
    }
}

/// One row of the loss diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagRow {
    pub frame: usize,
    pub phase: &'static str,
    pub iteration: usize,
    pub losses: LossBreakdown,
}

/// Per-frame summary.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub track_iters: usize,
    pub track_loss: f64,
    pub flagged: bool,
    /// ATE RMSE in cm over the frames so far, when ground truth exists.
    pub ate_so_far: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub rows: Vec<DiagRow>,
    pub frames: Vec<FrameRecord>,
}

impl Diagnostics {
    /// Loss rows as `frame,phase,iteration,term,value`.
    pub fn write_losses(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "frame,phase,iteration,term,value")?;
        for r in &self.rows {
            for (term, value) in r.losses.terms() {
                writeln!(out, "{},{},{},{term},{value:e}", r.frame, r.phase, r.iteration)?;
            }
        }
        Ok(())
    }

    pub fn write_frames(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "frame,ate_so_far_cm,track_iters,track_loss,flagged,wall_ms")?;
        for r in &self.frames {
            let ate = r.ate_so_far.map_or(String::new(), |a| format!("{a:.6}"));
            writeln!(
                out,
                "{},{ate},{},{:e},{},{}",
                r.frame, r.track_iters, r.track_loss, r.flagged, r.wall_ms
            )?;
        }
        Ok(())
    }
}

/// Rays and per-pixel targets, with rays ordered by `(class, frame slot)`.
pub(crate) fn build_rays(
    views: &[(&Frame, Pose, usize)],
    pixels: &[Vec<PixelSample>],
    k: &Intrinsics,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<RaySamples>, PixelTargets)> {
    let mut items = Vec::new();
    for ((frame, pose, slot), px) in views.iter().zip(pixels) {
        for p in px {
            let depth = frame.depth_at(p.x, p.y);
            let mut ray = sample_ray([p.x as f64, p.y as f64], pose, k, depth, sampling, rng)?;
            ray.class_id = p.class_id;
            ray.frame = *slot;
            items.push((ray, frame.color_at(p.x, p.y), depth));
        }
    }
    items.sort_by_key(|(r, _, _)| (r.class_id, r.frame));
    let mut targets = PixelTargets::default();
    let mut rays = Vec::with_capacity(items.len());
    for (r, c, d) in items {
        targets.color.push(c);
        targets.depth.push(d);
        targets.class_id.push(r.class_id);
        rays.push(r);
    }
    Ok((rays, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        SlamConfig::default().validate().unwrap();
        SlamConfig::toy().validate().unwrap();
        let bad = SlamConfig {
            window: 2,
            ..SlamConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SlamConfig {
            map_iters: 0,
            ..SlamConfig::default()
        };
        assert!(bad.validate().is_err());
        let text = toml::to_string(&SlamConfig::toy()).unwrap();
        let back: SlamConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, SlamConfig::toy());
        assert!(toml::from_str::<SlamConfig>("bogus = 1").is_err());
    }
}
