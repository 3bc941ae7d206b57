use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    build_rays, sample_class_pixels, sample_mapping_pixels, select_ba_frames, select_reference_frames, track_frame,
    BaMode, DiagRow, Diagnostics, FrameRecord, KeyframeDb, SlamConfig,
};
use crate::data::{format_sig9, Frame};
use crate::diffnet::{Adam, AdamConfig, Checkpoint, Gradients, Moments, RefView, Tape, Tensor, Trainable};
use crate::error::{Error, Result};
use crate::eval::ate_rmse;
use crate::field::SceneField;
use crate::geometry::{Intrinsics, Pose, PoseDelta};
use crate::loss::{mapping_loss, LossBreakdown, Rendered};
use crate::render::{render_batch, RayBatch, RenderMode};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Use ground-truth poses instead of tracking.
    pub gt_poses: bool,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub frames: Vec<usize>,
    pub mode: BaMode,
    pub losses: Vec<f64>,
    /// Whether the step was retried at half learning rate.
    pub retried: bool,
}

/// Mapping state: the field, its optimizer, the keyframe database and pose
/// estimates over a stream of frames.
pub struct Mapper<'a> {
    pub cfg: SlamConfig,
    pub k: Intrinsics,
    pub field: SceneField,
    pub db: KeyframeDb,
    pub frames: &'a [Frame],
    pub diagnostics: Diagnostics,
    adam: Adam,
    map_steps: usize,
    rng: ChaCha8Rng,
}

/// Pose-delta rows and Adam moments of the frames in a mapping batch.
struct PoseVars {
    frames: Vec<usize>,
    moments: Vec<Moments>,
    optimize: bool,
}

impl<'a> Mapper<'a> {
    pub fn new(field: SceneField, frames: &'a [Frame], k: Intrinsics, cfg: SlamConfig) -> Result<Self> {
        cfg.validate()?;
        k.validate()?;
        let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr_params));
        adam.set_lr_scale(field.table, cfg.lr_grid / cfg.lr_params);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            k,
            field,
            db: KeyframeDb::new(),
            frames,
            diagnostics: Diagnostics::default(),
            adam,
            map_steps: 0,
            rng,
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn features(&self, i: usize) -> Arc<crate::diffnet::FeatureMap> {
        match self.db.features(i) {
            Some(f) => f.clone(),
            None => {
                let f = &self.frames[i];
                Arc::new(self.field.image_features(&f.rgb, f.width, f.height))
            }
        }
    }

    pub fn ref_view(&self, i: usize) -> RefView {
        RefView::new(&self.db.pose(i), self.k, self.features(i))
    }

    /// Registers the pose of the next frame.
    pub fn push_pose(&mut self, pose: Pose) -> usize {
        self.db.push_pose(pose)
    }

    pub fn add_keyframe(&mut self, i: usize) -> Result<()> {
        let f = &self.frames[i];
        let feats = Arc::new(self.field.image_features(&f.rgb, f.width, f.height));
        self.db.add_keyframe(i, feats)
    }

    /// Fixed-pose optimization of the first frame; its classes join without
    /// burn-in.
    pub fn initialize(&mut self, pose0: Pose) -> Result<()> {
        if !self.db.poses().is_empty() {
            return Err(Error::Config("mapper already initialized".into()));
        }
        self.push_pose(pose0);
        self.add_keyframe(0)?;
        for c in self.frames[0].classes_present() {
            self.field.add_class(c)?;
        }
        let mut poses = PoseVars {
            frames: vec![0],
            moments: vec![Moments::new(6)],
            optimize: false,
        };
        for it in 0..self.cfg.init_iters {
            let b = self.iteration(&mut poses, 0, Trainable::All)?;
            if !b.total.is_finite() {
                return Err(Error::Optimization(format!("initial mapping diverged at iteration {it}")));
            }
            self.record(0, "init", it, b);
        }
        for c in self.field.class_ids().to_vec() {
            self.field.finish_warmup(c);
        }
        Ok(())
    }

    fn record(&mut self, frame: usize, phase: &'static str, iteration: usize, losses: LossBreakdown) {
        if self.cfg.diagnostics {
            self.diagnostics.rows.push(DiagRow {
                frame,
                phase,
                iteration,
                losses,
            });
        }
    }

    /// One optimization step over the frames in `poses`. Returns the loss
    /// terms; parameters and poses are left untouched when they are not
    /// finite.
    fn iteration(&mut self, poses: &mut PoseVars, current: usize, trainable: Trainable) -> Result<LossBreakdown> {
        let frames: Vec<&Frame> = poses.frames.iter().map(|i| &self.frames[*i]).collect();
        let pixels = sample_mapping_pixels(&frames, self.cfg.pixels_map, &mut self.rng);
        let views: Vec<(&Frame, Pose, usize)> = poses
            .frames
            .iter()
            .enumerate()
            .map(|(slot, i)| (&self.frames[*i], self.db.pose(*i), slot))
            .collect();
        let (rays, targets) = build_rays(&views, &pixels, &self.k, &self.cfg.sampling, &mut self.rng)?;
        let mut ref_views = Vec::new();
        let mut frame_views = Vec::new();
        for i in &poses.frames {
            let mut ids = Vec::new();
            for r in select_reference_frames(self.db.keyframes(), *i, current) {
                ids.push(ref_views.len());
                ref_views.push(self.ref_view(r));
            }
            frame_views.push(ids);
        }
        let batch = RayBatch {
            rays,
            views: ref_views,
            frame_views,
        };

        let mut tape = Tape::with_trainable(&self.field.params, trainable);
        let delta = tape.leaf(Tensor::zeros(poses.frames.len(), 6));
        let out = render_batch(&self.field, &mut tape, &batch, Some(delta), RenderMode::Fine)?;
        // The coarse head learns from fine latents only; its input is detached
        // so the latent loss does not move the shared grid.
        let coarse_in = tape.detach(out.encoded.input);
        let (h_coarse, _) = self.field.coarse(&mut tape, coarse_in)?;
        let r = Rendered {
            color: out.color,
            depth: out.depth,
            logits: out.logits,
            variance: out.variance,
            occ: out.occ,
            sample_depths: out.depths.data(),
        };
        let terms = mapping_loss(
            &mut tape,
            &r,
            Some((out.latent, h_coarse)),
            &targets,
            self.field.class_ids(),
            &self.cfg.weights,
        )?;
        let breakdown = terms.breakdown(&tape);
        if !breakdown.total.is_finite() {
            return Ok(breakdown);
        }
        let mut grads = Gradients::new();
        let leaf = tape.backward(terms.total, &mut grads)?;
        let dg = leaf.get(delta).cloned().unwrap_or_else(|| Tensor::zeros(poses.frames.len(), 6));
        drop(tape);
        if !grads.all_finite() || !dg.is_finite() {
            return Ok(LossBreakdown {
                total: f64::NAN,
                ..breakdown
            });
        }
        self.adam.step(&mut self.field.params, &grads);
        if poses.optimize {
            let cfg = AdamConfig::with_lr(self.cfg.lr_pose_map);
            for (slot, i) in poses.frames.iter().enumerate() {
                if *i == 0 {
                    continue;
                }
                let inc = poses.moments[slot].update(dg.row_slice(slot), &cfg);
                let p = self.db.pose(*i).apply_delta(&PoseDelta::from_slice(&inc));
                self.db.set_pose(*i, p);
            }
        }
        Ok(breakdown)
    }

    /// Joint optimization of the field and the poses of a bundle-adjustment
    /// window ending at `current`. Frame 0 never moves.
    pub fn map_step(&mut self, current: usize) -> Result<MapReport> {
        let mode = if self.map_steps.is_multiple_of(2) {
            BaMode::Local
        } else {
            BaMode::Global
        };
        self.map_steps += 1;
        let frames = select_ba_frames(
            &self.db,
            current,
            &self.frames[current],
            &self.k,
            self.cfg.window,
            mode,
            &mut self.rng,
        );
        let params = self.field.params.clone();
        let poses_before = self.db.poses().to_vec();
        let adam = self.adam.clone();
        let lr = self.adam.config.lr;
        let mut retried = false;
        loop {
            match self.run_map_iters(&frames, current) {
                Ok(losses) => {
                    self.adam.config.lr = lr;
                    return Ok(MapReport {
                        frames,
                        mode,
                        losses,
                        retried,
                    });
                }
                Err(it) => {
                    self.field.params = params.clone();
                    for (i, p) in poses_before.iter().enumerate() {
                        self.db.set_pose(i, *p);
                    }
                    self.adam = adam.clone();
                    if retried {
                        self.adam.config.lr = lr;
                        return Err(Error::Optimization(format!(
                            "mapping at frame {current} diverged at iteration {it} even at half learning rate"
                        )));
                    }
                    log::warn!("mapping at frame {current} diverged at iteration {it}; retrying at half learning rate");
                    self.adam.config.lr = lr * 0.5;
                    retried = true;
                }
            }
        }
    }

    fn run_map_iters(&mut self, frames: &[usize], current: usize) -> std::result::Result<Vec<f64>, usize> {
        let mut poses = PoseVars {
            frames: frames.to_vec(),
            moments: vec![Moments::new(6); frames.len()],
            optimize: true,
        };
        let mut losses = Vec::with_capacity(self.cfg.map_iters);
        for it in 0..self.cfg.map_iters {
            let b = self.iteration(&mut poses, current, Trainable::All).map_err(|e| {
                log::warn!("mapping iteration failed: {e}");
                it
            })?;
            if !b.total.is_finite() {
                return Err(it);
            }
            losses.push(b.total);
            self.record(current, "map", it, b);
        }
        Ok(losses)
    }

    /// Trains only the geometry head and semantic output of `class` on its
    /// own pixels, then lets it join the map.
    pub fn init_new_class(&mut self, class: u16, frames: &[usize]) -> Result<()> {
        let trainable: BTreeSet<_> = self.field.class_param_ids(class)?.into_iter().collect();
        let with_class: Vec<usize> = frames
            .iter()
            .copied()
            .filter(|i| self.frames[*i].semantic.contains(&class))
            .collect();
        if with_class.is_empty() {
            return Err(Error::NoClassPixels(class));
        }
        let mut adam = Adam::new(AdamConfig::with_lr(self.cfg.lr_params));
        let n = with_class.len();
        for it in 0..self.cfg.new_class_iters {
            let pixels: Vec<_> = with_class
                .iter()
                .enumerate()
                .map(|(fi, i)| {
                    let quota = self.cfg.pixels_map / n + usize::from(fi < self.cfg.pixels_map % n);
                    sample_class_pixels(&self.frames[*i], class, quota, &mut self.rng)
                })
                .collect();
            let views: Vec<(&Frame, Pose, usize)> = with_class
                .iter()
                .enumerate()
                .map(|(slot, i)| (&self.frames[*i], self.db.pose(*i), slot))
                .collect();
            let (rays, targets) = build_rays(&views, &pixels, &self.k, &self.cfg.sampling, &mut self.rng)?;
            let batch = RayBatch {
                rays,
                views: Vec::new(),
                frame_views: Vec::new(),
            };
            let mut tape = Tape::with_trainable(&self.field.params, Trainable::Only(trainable.iter().copied().collect()));
            let out = render_batch(&self.field, &mut tape, &batch, None, RenderMode::Fine)?;
            let r = Rendered {
                color: out.color,
                depth: out.depth,
                logits: out.logits,
                variance: out.variance,
                occ: out.occ,
                sample_depths: out.depths.data(),
            };
            let terms = mapping_loss(&mut tape, &r, None, &targets, self.field.class_ids(), &self.cfg.weights)?;
            let b = terms.breakdown(&tape);
            let mut grads = Gradients::new();
            if b.total.is_finite() {
                tape.backward(terms.total, &mut grads)?;
            }
            drop(tape);
            if b.total.is_finite() {
                adam.step(&mut self.field.params, &grads);
            }
            self.record(*frames.last().unwrap_or(&0), "burnin", it, b);
        }
        self.field.finish_warmup(class);
        Ok(())
    }

    /// Field checkpoint with pose estimates and keyframes as metadata.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.field.to_checkpoint()?;
        let poses: Vec<String> = self
            .db
            .poses()
            .iter()
            .map(|p| {
                let q = p.rotation.coords;
                [p.translation.x, p.translation.y, p.translation.z, q.x, q.y, q.z, q.w]
                    .map(format_sig9)
                    .join(" ")
            })
            .collect();
        ck.meta.insert("slam.poses".into(), poses.join("\n"));
        let kfs: Vec<String> = self.db.keyframes().iter().map(|k| k.to_string()).collect();
        ck.meta.insert("slam.keyframes".into(), kfs.join(" "));
        Ok(ck)
    }
}

/// Pose estimates and keyframe indices stored by [`Mapper::checkpoint`].
pub fn checkpoint_state(ck: &Checkpoint) -> Result<(Vec<Pose>, Vec<usize>)> {
    let bad = |what: &str| Error::Config(format!("checkpoint has no valid {what}"));
    let poses = ck
        .meta
        .get("slam.poses")
        .ok_or_else(|| bad("slam.poses"))?
        .lines()
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad("slam.poses"))?;
            if v.len() != 7 {
                return Err(bad("slam.poses"));
            }
            let q = UnitQuaternion::from_quaternion(Quaternion::new(v[6], v[3], v[4], v[5]));
            Ok(Pose::new(q, Vector3::new(v[0], v[1], v[2])))
        })
        .collect::<Result<Vec<_>>>()?;
    let keyframes = ck
        .meta
        .get("slam.keyframes")
        .ok_or_else(|| bad("slam.keyframes"))?
        .split_whitespace()
        .map(|k| k.parse().map_err(|_| bad("slam.keyframes")))
        .collect::<Result<Vec<usize>>>()?;
    if keyframes.iter().any(|k| *k >= poses.len()) {
        return Err(bad("keyframe index"));
    }
    Ok((poses, keyframes))
}

#[derive(Debug)]
pub struct SlamOutput {
    /// `(timestamp, pose)` per frame.
    pub trajectory: Vec<(f64, Pose)>,
    pub field: SceneField,
    pub keyframes: Vec<usize>,
    pub diagnostics: Diagnostics,
    /// Frames whose tracking diverged.
    pub flagged: Vec<usize>,
    pub checkpoint: Checkpoint,
}

/// Runs tracking and mapping over `frames`. Frame 0 is anchored at its
/// ground-truth pose when available, otherwise at the identity.
pub fn run_slam(frames: &[Frame], k: Intrinsics, field: SceneField, cfg: SlamConfig, opts: &RunOptions) -> Result<SlamOutput> {
    if frames.is_empty() {
        return Err(Error::Config("empty frame stream".into()));
    }
    if opts.gt_poses && frames.iter().any(|f| f.gt_pose.is_none()) {
        return Err(Error::Config("ground-truth pose mode needs a pose for every frame".into()));
    }
    let mut m = Mapper::new(field, frames, k, cfg)?;
    let mut track_rng = ChaCha8Rng::seed_from_u64(m.cfg.seed ^ 0x7eac_0000);
    let mut flagged = Vec::new();
    let start = Instant::now();
    m.initialize(frames[0].gt_pose.unwrap_or_else(Pose::identity))?;
    m.diagnostics.frames.push(FrameRecord {
        frame: 0,
        track_iters: 0,
        track_loss: 0.0,
        flagged: false,
        ate_so_far: None,
        wall_ms: start.elapsed().as_millis(),
    });
    let mut last_mapped = 0;
    for i in 1..frames.len() {
        let t0 = Instant::now();
        let (pose, iters, loss, bad) = if opts.gt_poses {
            (frames[i].gt_pose.unwrap(), 0, 0.0, false)
        } else {
            let reference = m.ref_view(i - 1);
            let prev = &m.db.poses()[i.saturating_sub(2)..i];
            let res = track_frame(&m.field, &frames[i], &k, prev, Some(&reference), &m.cfg, &mut track_rng)?;
            for (it, b) in res.history.iter().enumerate() {
                m.record(i, "track", it, *b);
            }
            (res.pose, res.iterations, res.loss, res.flagged)
        };
        if bad {
            flagged.push(i);
        }
        m.push_pose(pose);

        if i % m.cfg.ba_every == 0 {
            for j in last_mapped + 1..=i {
                if j % m.cfg.keyframe_every == 0 {
                    m.add_keyframe(j)?;
                }
            }
            let window: Vec<usize> = (last_mapped + 1..=i).collect();
            let mut new_classes = BTreeSet::new();
            for j in &window {
                new_classes.extend(frames[*j].classes_present().into_iter().filter(|c| !m.field.has_class(*c)));
            }
            for c in new_classes {
                m.field.add_class(c)?;
                m.init_new_class(c, &window)?;
            }
            m.map_step(i)?;
            last_mapped = i;
        }

        let ate_so_far = if i >= 2 && frames[..=i].iter().all(|f| f.gt_pose.is_some()) {
            let gt: Vec<Pose> = frames[..=i].iter().map(|f| f.gt_pose.unwrap()).collect();
            ate_rmse(m.db.poses(), &gt).ok()
        } else {
            None
        };
        m.diagnostics.frames.push(FrameRecord {
            frame: i,
            track_iters: iters,
            track_loss: loss,
            flagged: bad,
            ate_so_far,
            wall_ms: t0.elapsed().as_millis(),
        });
        if let Some(dir) = &opts.checkpoint_dir {
            if m.cfg.checkpoint_every > 0 && i % m.cfg.checkpoint_every == 0 {
                m.checkpoint()?.save(&dir.join(format!("ckpt_{i:06}.bin")))?;
            }
        }
        log::info!("frame {i}: {} tracking iterations, loss {loss:.4}", iters);
    }
    let checkpoint = m.checkpoint()?;
    let trajectory = frames.iter().zip(m.db.poses()).map(|(f, p)| (f.timestamp, *p)).collect();
    Ok(SlamOutput {
        trajectory,
        keyframes: m.db.keyframes().to_vec(),
        diagnostics: m.diagnostics,
        flagged,
        checkpoint,
        field: m.field,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_sequence;
    use crate::field::FieldConfig;

    #[test]
    fn gt_pose_run_and_checkpoint_state() {
        let (frames, k) = toy_sequence(3);
        let cfg = SlamConfig {
            init_iters: 2,
            map_iters: 2,
            new_class_iters: 2,
            pixels_map: 60,
            ba_every: 2,
            ..SlamConfig::toy()
        };
        let field = SceneField::new(FieldConfig::default()).unwrap();
        let opts = RunOptions {
            gt_poses: true,
            checkpoint_dir: None,
        };
        let out = run_slam(&frames, k, field, cfg, &opts).unwrap();
        assert_eq!(out.trajectory.len(), 3);
        assert_eq!(out.trajectory[0].1, frames[0].gt_pose.unwrap());
        for c in frames.iter().flat_map(Frame::classes_present) {
            assert!(out.field.has_class(c));
        }
        let (poses, keyframes) = checkpoint_state(&out.checkpoint).unwrap();
        assert_eq!(keyframes, out.keyframes);
        for (p, (_, q)) in poses.iter().zip(&out.trajectory) {
            assert!(p.translation_distance(q) < 1e-8 && p.rotation_angle_to(q) < 1e-7);
        }
        assert!(run_slam(&[], k, SceneField::new(FieldConfig::default()).unwrap(), SlamConfig::toy(), &opts).is_err());
    }
}
