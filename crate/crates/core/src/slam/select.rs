//! Keyframe bookkeeping, bundle-adjustment window and reference selection,
//! and stratified pixel sampling.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Frame;
use crate::diffnet::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};

/// Fraction of the overlap grid that must land in a candidate's frustum.
pub const OVERLAP_THRESHOLD: f64 = 0.10;
const OVERLAP_GRID: usize = 32;

/// Keyframe indices with cached image features, plus the estimated pose of
/// every frame seen so far.
#[derive(Clone, Debug, Default)]
pub struct KeyframeDb {
    keyframes: Vec<usize>,
    features: BTreeMap<usize, Arc<FeatureMap>>,
    poses: Vec<Pose>,
}

impl KeyframeDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn keyframes(&self) -> &[usize] {
        &self.keyframes
    }

    pub fn latest_keyframe(&self) -> Option<usize> {
        self.keyframes.last().copied()
    }

    pub fn is_keyframe(&self, i: usize) -> bool {
        self.keyframes.binary_search(&i).is_ok()
    }

    pub fn add_keyframe(&mut self, index: usize, features: Arc<FeatureMap>) -> Result<()> {
        if self.latest_keyframe().is_some_and(|k| k >= index) {
            return Err(Error::Config(format!("keyframe {index} is not after the latest keyframe")));
        }
        if index >= self.poses.len() {
            return Err(Error::Config(format!("keyframe {index} has no pose")));
        }
        self.keyframes.push(index);
        self.features.insert(index, features);
        Ok(())
    }

    pub fn features(&self, index: usize) -> Option<&Arc<FeatureMap>> {
        self.features.get(&index)
    }

    pub fn push_pose(&mut self, pose: Pose) -> usize {
        self.poses.push(pose);
        self.poses.len() - 1
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn pose(&self, i: usize) -> Pose {
        self.poses[i]
    }

    pub fn set_pose(&mut self, i: usize, pose: Pose) {
        self.poses[i] = pose;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaMode {
    Local,
    Global,
}

/// Share of the current frame's subsampled pixels (with depth) that land
/// inside `candidate`'s view frustum.
pub fn frustum_overlap(frame: &Frame, pose: &Pose, candidate: &Pose, k: &Intrinsics) -> f64 {
    let to_cand = candidate.inverse().compose(pose);
    let (mut valid, mut inside) = (0usize, 0usize);
    for gy in 0..OVERLAP_GRID {
        for gx in 0..OVERLAP_GRID {
            let x = (gx * frame.width + frame.width / 2) / OVERLAP_GRID;
            let y = (gy * frame.height + frame.height / 2) / OVERLAP_GRID;
            let Some(d) = frame.depth_at(x, y) else { continue };
            valid += 1;
            let p = k.ray_direction(Vector2::new(x as f64, y as f64)) * d;
            let q: Vector3<f64> = to_cand.transform_point(&p);
            if q.z > 0.0 && k.project(&q).is_ok_and(|uv| k.contains(&uv)) {
                inside += 1;
            }
        }
    }
    if valid == 0 {
        0.0
    } else {
        inside as f64 / valid as f64
    }
}

/// The current frame, the latest keyframe, and up to `window − 2` other
/// keyframes: overlapping ones in local mode, any in global mode. Sorted.
pub fn select_ba_frames(
    db: &KeyframeDb,
    current: usize,
    current_frame: &Frame,
    k: &Intrinsics,
    window: usize,
    mode: BaMode,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut out = vec![current];
    if let Some(latest) = db.latest_keyframe() {
        if latest != current {
            out.push(latest);
        }
    }
    let pose = db.pose(current);
    let candidates: Vec<usize> = db
        .keyframes()
        .iter()
        .copied()
        .filter(|kf| !out.contains(kf))
        .filter(|kf| match mode {
            BaMode::Global => true,
            BaMode::Local => frustum_overlap(current_frame, &pose, &db.pose(*kf), k) >= OVERLAP_THRESHOLD,
        })
        .collect();
    let room = window.saturating_sub(out.len()).min(candidates.len());
    out.extend(sample(rng, candidates.len(), room).iter().map(|i| candidates[i]));
    out.sort_unstable();
    out
}

/// Reference keyframes whose image features are pooled for `target`.
pub fn select_reference_frames(keyframes: &[usize], target: usize, current: usize) -> Vec<usize> {
    let others: Vec<usize> = keyframes.iter().copied().filter(|k| *k != target).collect();
    let before: Vec<usize> = others.iter().copied().filter(|k| *k < target).collect();
    let after: Vec<usize> = others.iter().copied().filter(|k| *k > target).collect();
    if target == current {
        return others[others.len().saturating_sub(2)..].to_vec();
    }
    if keyframes.last() == Some(&target) {
        return before[before.len().saturating_sub(2)..].to_vec();
    }
    before.last().into_iter().chain(after.first()).copied().collect()
}

/// Where a sampled pixel came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stratum {
    Uniform,
    Class(u16),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelSample {
    pub x: usize,
    pub y: usize,
    pub class_id: u16,
    pub stratum: Stratum,
}

/// Splits a per-frame quota: 60% uniform, 40% evenly over `classes`, with
/// the rounding residue returned to the uniform pool.
pub fn stratum_sizes(quota: usize, classes: usize) -> (usize, usize) {
    if classes == 0 {
        return (quota, 0);
    }
    let stratified = quota * 2 / 5;
    let per_class = stratified / classes;
    (quota - per_class * classes, per_class)
}

/// Samples `total` pixels over `frames` (quota `total / frames.len()` each,
/// leftovers to the earliest frames).
pub fn sample_mapping_pixels(frames: &[&Frame], total: usize, rng: &mut impl Rng) -> Vec<Vec<PixelSample>> {
    let n = frames.len().max(1);
    frames
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let quota = total / n + usize::from(fi < total % n);
            sample_frame_pixels(f, quota, rng)
        })
        .collect()
}

pub fn sample_frame_pixels(f: &Frame, quota: usize, rng: &mut impl Rng) -> Vec<PixelSample> {
    let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, c) in f.semantic.iter().enumerate() {
        by_class.entry(*c).or_default().push(i);
    }
    let (uniform, per_class) = stratum_sizes(quota, by_class.len());
    let pick = |i: usize, stratum| PixelSample {
        x: i % f.width,
        y: i / f.width,
        class_id: f.semantic[i],
        stratum,
    };
    let mut out = Vec::with_capacity(quota);
    for _ in 0..uniform {
        out.push(pick(rng.random_range(0..f.pixel_count()), Stratum::Uniform));
    }
    for (class, pixels) in &by_class {
        for _ in 0..per_class {
            out.push(pick(pixels[rng.random_range(0..pixels.len())], Stratum::Class(*class)));
        }
    }
    out
}

/// Uniform pixels over the whole image.
pub fn sample_uniform_pixels(f: &Frame, count: usize, rng: &mut impl Rng) -> Vec<PixelSample> {
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..f.pixel_count());
            PixelSample {
                x: i % f.width,
                y: i / f.width,
                class_id: f.semantic[i],
                stratum: Stratum::Uniform,
            }
        })
        .collect()
}

/// Uniform pixels restricted to one class.
pub fn sample_class_pixels(f: &Frame, class: u16, count: usize, rng: &mut impl Rng) -> Vec<PixelSample> {
    let pixels: Vec<usize> = (0..f.pixel_count()).filter(|i| f.semantic[*i] == class).collect();
    if pixels.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let i = pixels[rng.random_range(0..pixels.len())];
            PixelSample {
                x: i % f.width,
                y: i / f.width,
                class_id: class,
                stratum: Stratum::Class(class),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Orbit, SyntheticScene};
    use nalgebra::UnitQuaternion;
    use std::f64::consts::PI;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_rules() {
        assert_eq!(select_reference_frames(&[10, 20], 25, 25), vec![10, 20]);
        assert_eq!(select_reference_frames(&[10, 20, 30], 30, 35), vec![10, 20]);
        assert_eq!(select_reference_frames(&[10, 20, 30], 20, 35), vec![10, 30]);
        // Current frame that is itself the latest keyframe.
        assert_eq!(select_reference_frames(&[0, 5, 10], 10, 10), vec![0, 5]);
        assert_eq!(select_reference_frames(&[0], 0, 0), Vec::<usize>::new());
        assert_eq!(select_reference_frames(&[0, 5], 3, 7), vec![0, 5]);
        assert_eq!(select_reference_frames(&[0, 5, 10], 0, 12), vec![5]);
    }

    #[test]
    fn stratified_counts_are_exact() {
        let mut f = Frame::empty(10, 10);
        f.semantic = (0..100).map(|i| if i < 50 { 1 } else { 2 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_frame_pixels(&f, 100, &mut rng);
        assert_eq!(s.iter().filter(|p| p.stratum == Stratum::Uniform).count(), 60);
        for c in [1, 2] {
            let n = s.iter().filter(|p| p.stratum == Stratum::Class(c)).count();
            assert_eq!(n, 20);
            assert!(s.iter().filter(|p| p.stratum == Stratum::Class(c)).all(|p| p.class_id == c));
        }
        // Residues go to the uniform pool.
        f.semantic = (0..100).map(|i| (i % 3) as u16).collect();
        let s = sample_frame_pixels(&f, 101, &mut rng);
        assert_eq!(s.len(), 101);
        assert_eq!(s.iter().filter(|p| p.stratum == Stratum::Uniform).count(), 101 - 39);
        // Single class: whole 40% stratum is that class.
        f.semantic = vec![7; 100];
        let s = sample_frame_pixels(&f, 50, &mut rng);
        assert_eq!(s.iter().filter(|p| p.stratum == Stratum::Class(7)).count(), 20);
        let frames = [&f, &f, &f];
        let per = sample_mapping_pixels(&frames, 100, &mut rng);
        assert_eq!(per.iter().map(Vec::len).collect::<Vec<_>>(), vec![34, 33, 33]);
    }

    fn toy_db(n: usize) -> (KeyframeDb, Vec<Frame>, Intrinsics) {
        let k = Intrinsics::new(40.0, 40.0, 39.5, 29.5, 80, 60).unwrap();
        let scene = SyntheticScene::toy();
        let mut orbit = Orbit::toy();
        orbit.arc = std::f64::consts::TAU;
        let mut db = KeyframeDb::new();
        let mut frames = Vec::new();
        for (i, p) in orbit.poses(n).into_iter().enumerate() {
            frames.push(scene.raycast(&p, &k));
            db.push_pose(p);
            if i % 2 == 0 {
                db.add_keyframe(i, Arc::new(FeatureMap { width: 1, height: 1, channels: 1, stride: 2, data: vec![0.0] }))
                    .unwrap();
            }
        }
        (db, frames, k)
    }

    #[test]
    fn ba_selection_rules() {
        let (db, frames, k) = toy_db(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [BaMode::Local, BaMode::Global] {
            let sel = select_ba_frames(&db, 15, &frames[15], &k, 5, mode, &mut rng);
            assert!(sel.contains(&15) && sel.contains(&14));
            assert!(sel.len() <= 5);
            let mut dedup = sel.clone();
            dedup.dedup();
            assert_eq!(dedup, sel);
            if mode == BaMode::Local {
                for kf in sel.iter().filter(|i| **i != 15 && **i != 14) {
                    assert!(frustum_overlap(&frames[15], &db.pose(15), &db.pose(*kf), &k) >= OVERLAP_THRESHOLD);
                }
            }
        }
        // Low-overlap keyframes never enter a local window.
        let local = select_ba_frames(&db, 15, &frames[15], &k, 5, BaMode::Local, &mut rng);
        for kf in db.keyframes().iter().filter(|i| **i != 14) {
            if frustum_overlap(&frames[15], &db.pose(15), &db.pose(*kf), &k) < OVERLAP_THRESHOLD {
                assert!(!local.contains(kf));
            }
        }
        // A camera turned around on the spot sees none of the frame.
        let p15 = db.pose(15);
        let back = Pose::new(p15.rotation * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), PI), p15.translation);
        assert_eq!(frustum_overlap(&frames[15], &p15, &back, &k), 0.0);
        assert_eq!(frustum_overlap(&frames[15], &p15, &p15, &k), 1.0);
        let a = select_ba_frames(&db, 15, &frames[15], &k, 5, BaMode::Global, &mut ChaCha8Rng::seed_from_u64(9));
        let b = select_ba_frames(&db, 15, &frames[15], &k, 5, BaMode::Global, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);

        let (mut db1, frames1, _) = toy_db(1);
        assert_eq!(select_ba_frames(&db1, 0, &frames1[0], &k, 5, BaMode::Local, &mut rng), vec![0]);
        db1.push_pose(Pose::identity());
        assert_eq!(select_ba_frames(&db1, 1, &frames1[0], &k, 5, BaMode::Global, &mut rng), vec![0, 1]);
    }
}
