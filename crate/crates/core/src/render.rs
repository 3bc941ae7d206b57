//! Depth-guided ray sampling and differentiable volume integration.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{RefGroup, RefView, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{Encoded, SceneField};
use crate::geometry::{Intrinsics, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Samples drawn inside the truncation band around the observed depth.
    pub surface_samples: usize,
    /// Stratified samples over `[near, far]`.
    pub free_samples: usize,
    /// Truncation distance in metres.
    pub truncation: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            surface_samples: 15,
            free_samples: 32,
            truncation: 0.10,
            near: 0.0,
            far: 5.2,
        }
    }
}

impl SamplingConfig {
    pub fn samples_per_ray(&self) -> usize {
        self.surface_samples + self.free_samples
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near < self.far) || self.near < 0.0 {
            return Err(Error::Config(format!("need 0 <= near < far, got {}..{}", self.near, self.far)));
        }
        if self.surface_samples == 0 || self.free_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::Config("truncation must be positive".into()));
        }
        Ok(())
    }
}

/// Ordered samples along one camera ray. `depths` are z-depths: the sample
/// point is `origin + depth · direction` with `direction = R K⁻¹ (u, v, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub depths: Vec<f64>,
    pub gt_depth: Option<f64>,
    pub pixel: [f64; 2],
    pub class_id: u16,
    /// Index of the ray's frame within its batch.
    pub frame: usize,
}

impl RaySamples {
    pub fn point(&self, i: usize) -> Vector3<f64> {
        self.origin + self.depths[i] * self.direction
    }
}

pub fn sample_ray(
    pixel: [f64; 2],
    pose: &Pose,
    k: &Intrinsics,
    gt_depth: Option<f64>,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<RaySamples> {
    cfg.validate()?;
    let gt_depth = gt_depth.filter(|d| *d > 0.0);
    let m = cfg.samples_per_ray();
    let mut depths = Vec::with_capacity(m);
    let stratified = |n: usize, depths: &mut Vec<f64>, rng: &mut dyn rand::RngCore| {
        let step = (cfg.far - cfg.near) / n as f64;
        for j in 0..n {
            depths.push(cfg.near + (j as f64 + rng.random::<f64>()) * step);
        }
    };
    match gt_depth {
        Some(d) => {
            for _ in 0..cfg.surface_samples {
                depths.push(rng.random_range(d - cfg.truncation..=d + cfg.truncation));
            }
            stratified(cfg.free_samples, &mut depths, rng);
        }
        None => stratified(m, &mut depths, rng),
    }
    depths.sort_by(f64::total_cmp);
    let dir_cam = k.ray_direction(Vector2::new(pixel[0], pixel[1]));
    Ok(RaySamples {
        origin: pose.translation,
        direction: pose.transform_vector(&dir_cam),
        depths,
        gt_depth,
        pixel,
        class_id: 0,
        frame: 0,
    })
}

/// Rays of several frames plus the reference views each frame pools over.
#[derive(Clone, Debug, Default)]
pub struct RayBatch {
    pub rays: Vec<RaySamples>,
    pub views: Vec<RefView>,
    /// For each frame index, the indices into `views` it pools over.
    pub frame_views: Vec<Vec<usize>>,
}

impl RayBatch {
    pub fn samples_per_ray(&self) -> usize {
        self.rays.first().map_or(0, |r| r.depths.len())
    }

    /// Sample depths as an `R·M × 1` column.
    pub fn depth_column(&self) -> Tensor {
        Tensor::column(&self.rays.iter().flat_map(|r| r.depths.iter().copied()).collect::<Vec<_>>())
    }

    pub fn points(&self) -> Tensor {
        let m = self.samples_per_ray();
        let mut data = Vec::with_capacity(self.rays.len() * m * 3);
        for r in &self.rays {
            for i in 0..m {
                data.extend_from_slice(r.point(i).as_slice());
            }
        }
        Tensor::from_vec(self.rays.len() * m, 3, data).expect("shape")
    }

    fn ref_groups(&self) -> Vec<RefGroup> {
        let m = self.samples_per_ray();
        let mut out: Vec<RefGroup> = Vec::new();
        for (i, r) in self.rays.iter().enumerate() {
            let views = self.frame_views.get(r.frame).cloned().unwrap_or_default();
            match out.last_mut() {
                Some(g) if g.views == views && g.rows.end == i * m => g.rows.end = (i + 1) * m,
                _ => out.push(RefGroup {
                    rows: i * m..(i + 1) * m,
                    views,
                }),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    /// Each ray uses the geometry head of its pixel's class.
    Fine,
    /// Every ray uses the coarse head.
    Coarse,
    /// Each sample uses the class head with the highest occupancy.
    Merged,
}

/// Tape handles of a rendered batch.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Var,
    pub depth: Var,
    pub logits: Var,
    pub variance: Var,
    /// `R × M`.
    pub weights: Var,
    /// Per-sample occupancy, `R·M × 1`.
    pub occ: Var,
    /// Per-sample latent of the head used, `R·M × latent`.
    pub latent: Var,
    pub encoded: Encoded,
    pub points: Var,
    pub depths: Tensor,
}

/// Renders every ray of `batch`. With `delta` (`frames × 6`), each frame's
/// sample points are moved by the frame's pose increment so gradients reach
/// the poses.
pub fn render_batch(
    field: &SceneField,
    tape: &mut Tape,
    batch: &RayBatch,
    delta: Option<Var>,
    mode: RenderMode,
) -> Result<RenderOutput> {
    let r = batch.rays.len();
    let m = batch.samples_per_ray();
    if r == 0 || m == 0 {
        return Err(Error::Shape("empty ray batch".into()));
    }
    if let Some(bad) = batch.rays.iter().find(|ray| ray.depths.len() != m) {
        return Err(Error::Shape(format!("ray at {:?} has {} samples, expected {m}", bad.pixel, bad.depths.len())));
    }
    let q = batch.points();
    let points = match delta {
        Some(d) => {
            let frame: Vec<usize> = batch.rays.iter().flat_map(|ray| std::iter::repeat_n(ray.frame, m)).collect();
            tape.rigid_transform(d, &q, &frame)
        }
        None => tape.constant(q),
    };
    let encoded = field.encode(tape, points);
    let (latent, occ) = match mode {
        RenderMode::Coarse => field.coarse(tape, encoded.input)?,
        RenderMode::Merged => merged_geometry(field, tape, encoded.input, r * m)?,
        RenderMode::Fine => {
            let mut parts = Vec::new();
            let mut start = 0;
            while start < r {
                let class = batch.rays[start].class_id;
                let mut end = start + 1;
                while end < r && batch.rays[end].class_id == class {
                    end += 1;
                }
                let rows = tape.slice_rows(encoded.input, start * m, (end - start) * m);
                parts.push(field.geometry(tape, class, rows)?);
                start = end;
            }
            if parts.len() == 1 {
                parts[0]
            } else {
                let hs: Vec<Var> = parts.iter().map(|p| p.0).collect();
                let os: Vec<Var> = parts.iter().map(|p| p.1).collect();
                (tape.concat_rows(&hs), tape.concat_rows(&os))
            }
        }
    };
    let pooled = field.pooled(tape, points, &batch.views, &batch.ref_groups())?;
    let sample_color = field.color(tape, encoded.oneblob, latent, pooled)?;
    let sample_logits = field.semantic(tape, encoded.oneblob, latent, pooled)?;
    let occ_rm = tape.reshape(occ, r, m);
    let weights = tape.termination_weights(occ_rm);
    let depths = batch.depth_column();
    let depth_var = tape.constant(depths.clone());
    let color = tape.integrate(weights, sample_color);
    let depth = tape.integrate(weights, depth_var);
    let logits = tape.integrate(weights, sample_logits);
    let variance = tape.depth_variance(weights, depth_var);
    Ok(RenderOutput {
        color,
        depth,
        logits,
        variance,
        weights,
        occ,
        latent,
        encoded,
        points,
        depths,
    })
}

fn merged_geometry(field: &SceneField, tape: &mut Tape, input: Var, n: usize) -> Result<(Var, Var)> {
    let ids = field.class_ids().to_vec();
    if ids.is_empty() {
        return Err(Error::Shape("field has no classes".into()));
    }
    let mut hs = Vec::new();
    let mut os = Vec::new();
    for id in &ids {
        let (h, o) = field.geometry(tape, *id, input)?;
        hs.push(h);
        os.push(o);
    }
    let pick: Vec<usize> = (0..n)
        .map(|i| {
            let best = (0..ids.len())
                .max_by(|a, b| tape.value(os[*a]).data()[i].total_cmp(&tape.value(os[*b]).data()[i]))
                .expect("classes");
            best * n + i
        })
        .collect();
    let h = tape.concat_rows(&hs);
    let o = tape.concat_rows(&os);
    Ok((tape.gather_rows(h, &pick), tape.gather_rows(o, &pick)))
}

/// One rendered pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPixel {
    pub color: [f64; 3],
    pub depth: f64,
    pub logits: Vec<f64>,
    pub depth_variance: f64,
    pub weights: Vec<f64>,
}

pub fn render_pixel(field: &SceneField, samples: &RaySamples, refs: &[RefView], mode: RenderMode) -> Result<RenderedPixel> {
    let mut ray = samples.clone();
    ray.frame = 0;
    let batch = RayBatch {
        rays: vec![ray],
        views: refs.to_vec(),
        frame_views: vec![(0..refs.len()).collect()],
    };
    let mut tape = Tape::frozen(&field.params);
    let out = render_batch(field, &mut tape, &batch, None, mode)?;
    let c = tape.value(out.color).data();
    Ok(RenderedPixel {
        color: [c[0], c[1], c[2]],
        depth: tape.value(out.depth).item(),
        logits: tape.value(out.logits).data().to_vec(),
        depth_variance: tape.value(out.variance).item(),
        weights: tape.value(out.weights).data().to_vec(),
    })
}

/// `w_i = o_i Π_{j<i} (1 − o_j)`.
pub fn termination_weights(occs: &[f64]) -> Vec<f64> {
    let mut t = 1.0;
    occs.iter()
        .map(|o| {
            let w = o * t;
            t *= 1.0 - o;
            w
        })
        .collect()
}

pub fn integrate(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(w, v)| w * v).sum()
}

pub fn depth_variance(weights: &[f64], depths: &[f64], rendered_depth: f64) -> f64 {
    weights
        .iter()
        .zip(depths)
        .map(|(w, d)| w * (rendered_depth - d) * (rendered_depth - d))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::gradcheck::{check_leaves, check_params, CheckConfig};
    use crate::diffnet::ParamStore;
    use crate::field::FieldConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(60.0, 60.0, 39.5, 29.5, 80, 60).unwrap()
    }

    #[test]
    fn surface_samples_in_band_and_sorted() {
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = sample_ray([10.0, 20.0], &Pose::identity(), &k(), Some(2.0), &cfg, &mut rng).unwrap();
            assert_eq!(s.depths.len(), 47);
            assert!(s.depths.windows(2).all(|w| w[0] < w[1]));
            let in_band = s.depths.iter().filter(|d| (1.9..=2.1).contains(*d)).count();
            assert!(in_band >= 15);
        }
    }

    #[test]
    fn stratified_samples_fill_each_bin() {
        let cfg = SamplingConfig {
            near: 0.0,
            far: 3.2,
            ..SamplingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_ray([0.0, 0.0], &Pose::identity(), &k(), None, &cfg, &mut rng).unwrap();
        let m = cfg.samples_per_ray();
        let step = 3.2 / m as f64;
        for (j, d) in s.depths.iter().enumerate() {
            assert!(*d >= j as f64 * step && *d < (j + 1) as f64 * step);
        }
        // With a depth, the free samples still occupy one per bin.
        let s = sample_ray([0.0, 0.0], &Pose::identity(), &k(), Some(9.0), &cfg, &mut rng).unwrap();
        let step = 3.2 / 32.0;
        for j in 0..32 {
            let n = s.depths.iter().filter(|d| **d >= j as f64 * step && **d < (j + 1) as f64 * step).count();
            assert_eq!(n, 1);
        }
        let bad = SamplingConfig { near: 2.0, far: 1.0, ..cfg };
        assert!(matches!(sample_ray([0.0, 0.0], &Pose::identity(), &k(), None, &bad, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn plain_weight_helpers() {
        assert_eq!(termination_weights(&[1.0, 0.3, 0.9]), vec![1.0, 0.0, 0.0]);
        assert_eq!(termination_weights(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(termination_weights(&[0.5, 0.5]), vec![0.5, 0.25]);
        assert_eq!(integrate(&[1.0, 0.0, 0.0], &[4.5, 1.0, 2.0]), 4.5);
        assert_eq!(integrate(&[0.0, 0.0], &[4.5, 1.0]), 0.0);
        assert_eq!(depth_variance(&[0.5, 0.5], &[1.0, 3.0], 2.0), 1.0);
        assert_eq!(depth_variance(&[1.0], &[2.0], 2.0), 0.0);
        assert_eq!(depth_variance(&[0.5, 0.5, 0.0], &[1.0, 3.0, 7.0], 2.0), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let o: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
            let w = termination_weights(&o);
            assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(w.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    fn toy_field() -> SceneField {
        let mut f = SceneField::new(FieldConfig {
            grid_levels: 4,
            grid_base_resolution: 4,
            finest_voxel: 0.1,
            grid_log2_table_size: 12,
            seed: 4,
            ..FieldConfig::default()
        })
        .unwrap();
        f.add_class(0).unwrap();
        f.add_class(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in f.params.ids().collect::<Vec<_>>() {
            let scale = 0.3;
            f.params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-scale..scale));
        }
        f
    }

    fn four_sample_batch(field: &SceneField) -> RayBatch {
        let pose = Pose::look_at(Vector3::new(1.03, 0.11, 0.07), Vector3::new(0.0, 0.0, 0.05), Vector3::z());
        let enc = &field.encoder;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img: Vec<f64> = (0..80 * 60 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let fm = std::sync::Arc::new(enc.features(&img, 80, 60));
        let ref_pose = Pose::look_at(Vector3::new(0.93, -0.31, 0.12), Vector3::zeros(), Vector3::z());
        let mut rays = Vec::new();
        for (i, px) in [[41.3, 28.7], [37.2, 33.9]].iter().enumerate() {
            let mut ray = sample_ray(
                *px,
                &pose,
                &k(),
                Some(1.0),
                &SamplingConfig {
                    surface_samples: 2,
                    free_samples: 2,
                    truncation: 0.1,
                    near: 0.1,
                    far: 2.0,
                },
                &mut rng,
            )
            .unwrap();
            ray.class_id = i as u16;
            rays.push(ray);
        }
        RayBatch {
            rays,
            views: vec![RefView::new(&ref_pose, k(), fm)],
            frame_views: vec![vec![0]],
        }
    }

    fn scalar_of(tape: &mut Tape, out: &RenderOutput) -> Var {
        let d = tape.sum(out.depth);
        let c = tape.sum(out.color);
        let v = tape.sum(out.variance);
        let ce = tape.softmax_cross_entropy(out.logits, &[0, 1]);
        let s = tape.sum(ce);
        let a = tape.add(d, c);
        let b = tape.add(v, s);
        tape.add(a, b)
    }

    #[test]
    fn gradients_wrt_pose_delta_and_parameters() {
        let field = toy_field();
        let batch = four_sample_batch(&field);
        let delta = Tensor::zeros(1, 6);
        let rep = check_leaves(&field.params, &[delta], &CheckConfig::default(), |t, v| {
            let out = render_batch(&field, t, &batch, Some(v[0]), RenderMode::Fine).unwrap();
            scalar_of(t, &out)
        });
        assert!(rep.passed(), "{rep:?}");
        let mut store: ParamStore = field.params.clone();
        let mut ids = vec![field.table];
        ids.extend(field.head(0).unwrap().param_ids());
        ids.extend(field.color_param_ids());
        let rep = check_params(&mut store, &ids, 8, &CheckConfig::default(), |t| {
            let out = render_batch(&field, t, &batch, None, RenderMode::Fine).unwrap();
            scalar_of(t, &out)
        });
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn render_pixel_invariants() {
        let field = toy_field();
        let batch = four_sample_batch(&field);
        for mode in [RenderMode::Fine, RenderMode::Coarse] {
            let px = render_pixel(&field, &batch.rays[1], &batch.views, mode).unwrap();
            assert!(px.weights.iter().all(|w| (0.0..=1.0).contains(w)));
            assert!(px.weights.iter().sum::<f64>() <= 1.0 + 1e-12);
            assert!(px.color.iter().all(|c| (0.0..=1.0).contains(c)));
            assert!(px.depth_variance >= 0.0);
            assert_eq!(px.logits.len(), 2);
        }
        let mut f2 = field.clone();
        f2.copy_head_into_coarse(1).unwrap();
        let fine = render_pixel(&f2, &batch.rays[1], &batch.views, RenderMode::Fine).unwrap();
        let coarse = render_pixel(&f2, &batch.rays[1], &batch.views, RenderMode::Coarse).unwrap();
        assert_eq!(fine.weights, coarse.weights);
        let mut missing = batch.rays[0].clone();
        missing.class_id = 9;
        assert!(matches!(
            render_pixel(&field, &missing, &[], RenderMode::Fine),
            Err(Error::UnknownClass(9))
        ));
    }
}
