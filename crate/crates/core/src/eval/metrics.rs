use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Frame, UNLABELED};
use crate::diffnet::{RefView, Tape};
use crate::error::{Error, Result};
use crate::field::SceneField;
use crate::geometry::{Intrinsics, Pose};
use crate::render::{render_batch, sample_ray, RayBatch, RaySamples, RenderMode, SamplingConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Stratified samples per ray; evaluation does not use sensor depth.
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    /// Rays per render batch.
    pub chunk: usize,
    /// Evaluate every `stride`-th view.
    pub stride: usize,
    /// How geometry heads are chosen per ray. Pixels whose class the field
    /// does not know fall back to the coarse head in fine mode.
    pub mode: RenderMode,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 128,
            near: 0.1,
            far: 4.5,
            chunk: 256,
            stride: 1,
            mode: RenderMode::Fine,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || self.chunk == 0 || self.stride == 0 {
            return Err(Error::Config("eval needs samples >= 2, chunk >= 1, stride >= 1".into()));
        }
        self.sampling().validate()
    }

    fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            surface_samples: 1,
            free_samples: self.samples - 1,
            truncation: 0.1,
            near: self.near,
            far: self.far,
        }
    }
}

/// A frame to evaluate, the pose to render it from and the reference views
/// its colour and semantics pool over.
#[derive(Clone, Debug)]
pub struct EvalView<'a> {
    pub frame: &'a Frame,
    pub pose: Pose,
    pub refs: Vec<RefView>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub labels: Vec<u16>,
    pub rgb: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).max_by(|a, b| row[*a].total_cmp(&row[*b])).unwrap_or(0)
}

/// Renders every pixel of a view.
pub fn render_view(field: &SceneField, view: &EvalView, k: &Intrinsics, cfg: &EvalConfig) -> Result<RenderedImage> {
    cfg.validate()?;
    let f = view.frame;
    if f.width != k.width || f.height != k.height {
        return Err(Error::Shape("frame size differs from the intrinsics".into()));
    }
    let n = f.pixel_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (f.index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let sampling = cfg.sampling();
    let mut out = RenderedImage {
        width: f.width,
        height: f.height,
        depth: vec![0.0; n],
        labels: vec![UNLABELED; n],
        rgb: vec![0.0; 3 * n],
    };
    let pixels: Vec<usize> = (0..n).collect();
    for chunk in pixels.chunks(cfg.chunk) {
        let mut rays: Vec<(usize, RaySamples)> = Vec::with_capacity(chunk.len());
        for &p in chunk {
            let (x, y) = (p % f.width, p / f.width);
            let mut ray = sample_ray([x as f64, y as f64], &view.pose, k, None, &sampling, &mut rng)?;
            ray.class_id = f.class_at(x, y);
            rays.push((p, ray));
        }
        let groups: Vec<(RenderMode, Vec<(usize, RaySamples)>)> = match cfg.mode {
            RenderMode::Fine => {
                let (mut known, unknown): (Vec<_>, Vec<_>) =
                    rays.into_iter().partition(|(_, r)| field.has_class(r.class_id));
                known.sort_by_key(|(_, r)| r.class_id);
                vec![(RenderMode::Fine, known), (RenderMode::Coarse, unknown)]
            }
            mode => vec![(mode, rays)],
        };
        for (mode, group) in groups {
            if group.is_empty() {
                continue;
            }
            let (ids, rays): (Vec<usize>, Vec<RaySamples>) = group.into_iter().unzip();
            let batch = RayBatch {
                rays,
                views: view.refs.clone(),
                frame_views: vec![(0..view.refs.len()).collect()],
            };
            let mut tape = Tape::frozen(&field.params);
            let r = render_batch(field, &mut tape, &batch, None, mode)?;
            let (depth, logits, color) = (tape.value(r.depth), tape.value(r.logits), tape.value(r.color));
            for (row, p) in ids.iter().enumerate() {
                out.depth[*p] = depth.data()[row];
                out.labels[*p] = field.class_ids()[argmax(logits.row_slice(row))];
                out.rgb[3 * p..3 * p + 3].copy_from_slice(color.row_slice(row));
            }
        }
    }
    Ok(out)
}

/// Mean absolute depth error in cm over pixels with valid sensor depth, or
/// `None` when there are none.
pub fn depth_l1_of(pairs: &[(&[f64], &Frame)]) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for (rendered, frame) in pairs {
        for (r, g) in rendered.iter().zip(&frame.depth) {
            if *g > 0.0 {
                sum += (r - g).abs();
                count += 1;
            }
        }
    }
    (count > 0).then(|| 100.0 * sum / count as f64)
}

/// Pixel counts per `(gt, predicted)` class pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Confusion {
    counts: BTreeMap<(u16, u16), u64>,
}

impl Confusion {
    /// Adds a labelling; unlabelled ground-truth pixels are skipped.
    pub fn add(&mut self, pred: &[u16], gt: &[u16]) {
        for (p, g) in pred.iter().zip(gt) {
            if *g != UNLABELED {
                *self.counts.entry((*g, *p)).or_default() += 1;
            }
        }
    }

    /// IoU per class present in the ground truth.
    pub fn ious(&self) -> BTreeMap<u16, f64> {
        let mut tp: BTreeMap<u16, u64> = BTreeMap::new();
        let mut gt_total: BTreeMap<u16, u64> = BTreeMap::new();
        let mut pred_total: BTreeMap<u16, u64> = BTreeMap::new();
        for ((g, p), n) in &self.counts {
            *gt_total.entry(*g).or_default() += n;
            *pred_total.entry(*p).or_default() += n;
            if g == p {
                *tp.entry(*g).or_default() += n;
            }
        }
        gt_total
            .iter()
            .map(|(c, gtn)| {
                let t = tp.get(c).copied().unwrap_or(0);
                let union = gtn + pred_total.get(c).copied().unwrap_or(0) - t;
                (*c, t as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU in percent over classes present in the ground truth.
    pub fn miou(&self) -> Option<f64> {
        let ious = self.ious();
        (!ious.is_empty()).then(|| 100.0 * ious.values().sum::<f64>() / ious.len() as f64)
    }
}

pub fn miou_of(pairs: &[(&[u16], &[u16])]) -> Option<f64> {
    let mut c = Confusion::default();
    for (p, g) in pairs {
        c.add(p, g);
    }
    c.miou()
}

/// Depth L1 (cm) and mIoU (%) of the rendered views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMetrics {
    pub depth_l1: Option<f64>,
    pub miou: Option<f64>,
    pub views: usize,
}

/// Renders every `cfg.stride`-th view once and scores depth and labels.
pub fn evaluate_views(field: &SceneField, views: &[EvalView], k: &Intrinsics, cfg: &EvalConfig) -> Result<ViewMetrics> {
    cfg.validate()?;
    let picked: Vec<&EvalView> = views.iter().step_by(cfg.stride).collect();
    let images: Vec<RenderedImage> = picked.iter().map(|v| render_view(field, v, k, cfg)).collect::<Result<_>>()?;
    let depth_pairs: Vec<(&[f64], &Frame)> = images.iter().zip(&picked).map(|(i, v)| (&i.depth[..], v.frame)).collect();
    let label_pairs: Vec<(&[u16], &[u16])> = images
        .iter()
        .zip(&picked)
        .map(|(i, v)| (&i.labels[..], &v.frame.semantic[..]))
        .collect();
    Ok(ViewMetrics {
        depth_l1: depth_l1_of(&depth_pairs),
        miou: miou_of(&label_pairs),
        views: picked.len(),
    })
}

pub fn depth_l1(field: &SceneField, views: &[EvalView], k: &Intrinsics, cfg: &EvalConfig) -> Result<Option<f64>> {
    Ok(evaluate_views(field, views, k, cfg)?.depth_l1)
}

pub fn miou(field: &SceneField, views: &[EvalView], k: &Intrinsics, cfg: &EvalConfig) -> Result<Option<f64>> {
    Ok(evaluate_views(field, views, k, cfg)?.miou)
}

/// Up to `n` keyframes closest in index to `target`, excluding it.
pub fn nearest_keyframes(keyframes: &[usize], target: usize, n: usize) -> Vec<usize> {
    let mut k: Vec<usize> = keyframes.iter().copied().filter(|k| *k != target).collect();
    k.sort_by_key(|k| (k.abs_diff(target), *k));
    k.truncate(n);
    k.sort_unstable();
    k
}
