use rand::Rng;

use super::{build_rays, sample_uniform_pixels, SlamConfig};
use crate::data::Frame;
use crate::diffnet::{AdamConfig, Gradients, Moments, RefView, Tape, Tensor};
use crate::error::Result;
use crate::field::SceneField;
use crate::geometry::{constant_speed_guess, Intrinsics, Pose, PoseDelta};
use crate::loss::{photometric_loss, semantic_loss, tracking_geometry_loss, LossBreakdown, Rendered};
use crate::render::{render_batch, RayBatch, RenderMode};

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    /// Pose with the lowest loss seen.
    pub pose: Pose,
    pub loss: f64,
    pub iterations: usize,
    /// Set when the loss became non-finite; `pose` is then the initial guess.
    pub flagged: bool,
    pub history: Vec<LossBreakdown>,
}

/// Tracks `frame` starting from the constant-speed guess built from the two
/// latest poses. The field is only read.
pub fn track_frame(
    field: &SceneField,
    frame: &Frame,
    k: &Intrinsics,
    prev_poses: &[Pose],
    reference: Option<&RefView>,
    cfg: &SlamConfig,
    rng: &mut impl Rng,
) -> Result<TrackResult> {
    let guess = match prev_poses {
        [.., p2, p1] => constant_speed_guess(p1, p2),
        [p1] => *p1,
        [] => Pose::identity(),
    };
    track_from(field, frame, k, guess, reference, cfg.track_iters, cfg, rng)
}

#[allow(clippy::too_many_arguments)]
pub fn track_from(
    field: &SceneField,
    frame: &Frame,
    k: &Intrinsics,
    init: Pose,
    reference: Option<&RefView>,
    iters: usize,
    cfg: &SlamConfig,
    rng: &mut impl Rng,
) -> Result<TrackResult> {
    let adam = AdamConfig::with_lr(cfg.lr_pose_track);
    let mut moments = Moments::new(6);
    let mut pose = init;
    let mut best = (f64::INFINITY, init);
    let mut history = Vec::with_capacity(iters);
    let views: Vec<RefView> = reference.cloned().into_iter().collect();
    let frame_views = vec![(0..views.len()).collect()];
    for _ in 0..iters {
        let pixels = sample_uniform_pixels(frame, cfg.pixels_track, rng);
        let (rays, targets) = build_rays(&[(frame, pose, 0)], &[pixels], k, &cfg.sampling, rng)?;
        let batch = RayBatch {
            rays,
            views: views.clone(),
            frame_views: frame_views.clone(),
        };
        let mut tape = Tape::frozen(&field.params);
        let delta = tape.leaf(Tensor::zeros(1, 6));
        let out = render_batch(field, &mut tape, &batch, Some(delta), RenderMode::Coarse)?;
        let r = Rendered {
            color: out.color,
            depth: out.depth,
            logits: out.logits,
            variance: out.variance,
            occ: out.occ,
            sample_depths: out.depths.data(),
        };
        // Pixels of classes the map has not seen yet carry no semantic loss.
        let known: Vec<usize> = (0..targets.len()).filter(|i| field.has_class(targets.class_id[*i])).collect();
        let known_ids: Vec<u16> = known.iter().map(|i| targets.class_id[*i]).collect();
        // The variance only weights residuals. With gradient it rewards poses
        // that look at blurry geometry.
        let variance = tape.detach(r.variance);
        let geometry = tracking_geometry_loss(&mut tape, r.depth, variance, &targets.depth);
        let photometric = photometric_loss(&mut tape, r.color, &targets.color);
        let logits = tape.gather_rows(r.logits, &known);
        let semantic = semantic_loss(&mut tape, logits, &known_ids, field.class_ids())?;
        let p = tape.scale(photometric, cfg.weights.lambda_p);
        let s = tape.scale(semantic, cfg.weights.lambda_s);
        let total = tape.add(geometry, p);
        let total = tape.add(total, s);
        let loss = tape.value(total).item();
        history.push(LossBreakdown {
            total: loss,
            geometry: tape.value(geometry).item(),
            photometric: tape.value(photometric).item(),
            semantic: tape.value(semantic).item(),
            ..Default::default()
        });
        if !loss.is_finite() {
            log::warn!("tracking loss became non-finite; keeping the initial guess");
            return Ok(TrackResult {
                pose: init,
                loss,
                iterations: history.len(),
                flagged: true,
                history,
            });
        }
        if loss < best.0 {
            best = (loss, pose);
        }
        let grads = tape.backward(total, &mut Gradients::new())?;
        let g = grads.get(delta).map_or(vec![0.0; 6], |t| t.data().to_vec());
        if g.iter().any(|v| !v.is_finite()) {
            log::warn!("tracking gradient became non-finite; keeping the initial guess");
            return Ok(TrackResult {
                pose: init,
                loss: f64::NAN,
                iterations: history.len(),
                flagged: true,
                history,
            });
        }
        let inc = moments.update(&g, &adam);
        pose = pose.apply_delta(&PoseDelta::from_slice(&inc));
    }
    Ok(TrackResult {
        pose: best.1,
        loss: best.0,
        iterations: history.len(),
        flagged: false,
        history,
    })
}
