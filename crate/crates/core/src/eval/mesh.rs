use std::collections::HashMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use super::mc::{marching_cubes, ScalarGrid};
use crate::data::{Frame, Shape, SyntheticScene};
use crate::diffnet::Tensor;
use crate::error::{Error, Result};
use crate::field::SceneField;
use crate::geometry::{Intrinsics, Pose};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    /// Metres.
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub class_ids: Vec<u16>,
    pub colors: Vec<[u8; 3]>,
}

impl TriangleMesh {
    /// A mesh whose vertices all carry `class_id` and `color`.
    pub fn uniform(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>, class_id: u16, color: [u8; 3]) -> Self {
        let n = vertices.len();
        Self {
            vertices,
            triangles,
            class_ids: vec![class_id; n],
            colors: vec![color; n],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.class_ids.len() != n || self.colors.len() != n {
            return Err(Error::Shape("per-vertex attributes do not match vertex count".into()));
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|i| *i as usize >= n)) {
            return Err(Error::Shape(format!("triangle {t:?} indexes past {n} vertices")));
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Drops zero-area triangles and unreferenced vertices.
    pub fn cleanup(&mut self) {
        let keep: Vec<bool> = (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangles[t];
                a != b && b != c && a != c && self.triangle_area(t) > 0.0
            })
            .collect();
        let mut i = 0;
        self.triangles.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        self.compact();
    }

    /// Removes vertices where `keep` is false, with every triangle touching
    /// them.
    pub fn retain_vertices(&mut self, keep: &[bool]) {
        self.triangles.retain(|t| t.iter().all(|i| keep[*i as usize]));
        self.compact();
    }

    fn compact(&mut self) {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for i in t {
                used[*i as usize] = true;
            }
        }
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut next = 0u32;
        for (i, u) in used.iter().enumerate() {
            if *u {
                remap[i] = next;
                self.vertices[next as usize] = self.vertices[i];
                self.class_ids[next as usize] = self.class_ids[i];
                self.colors[next as usize] = self.colors[i];
                next += 1;
            }
        }
        self.vertices.truncate(next as usize);
        self.class_ids.truncate(next as usize);
        self.colors.truncate(next as usize);
        for t in &mut self.triangles {
            *t = t.map(|i| remap[i as usize]);
        }
    }

    /// Concatenation of several meshes.
    pub fn merge(meshes: &[TriangleMesh]) -> Self {
        let mut out = TriangleMesh::default();
        for m in meshes {
            let off = out.vertices.len() as u32;
            out.vertices.extend_from_slice(&m.vertices);
            out.class_ids.extend_from_slice(&m.class_ids);
            out.colors.extend_from_slice(&m.colors);
            out.triangles.extend(m.triangles.iter().map(|t| t.map(|i| i + off)));
        }
        out
    }

    /// Uniform area-weighted surface samples.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in 0..self.triangles.len() {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let t = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
                let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
                let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                let s = r1.sqrt();
                a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeshMode {
    Merged,
    PerClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Grid cells along the longest side of the scene bounds.
    pub resolution: usize,
    pub iso: f64,
    /// Points per network evaluation.
    pub chunk: usize,
    pub threads: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            iso: 0.5,
            chunk: 8192,
            threads: 1,
        }
    }
}

impl MeshConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 || self.chunk == 0 || self.threads == 0 {
            return Err(Error::Config("mesh resolution must be >= 2 and chunk, threads >= 1".into()));
        }
        Ok(())
    }
}

/// Applies `f` to consecutive chunks of `points`, on up to `threads` threads,
/// and concatenates the results in order.
fn map_chunks<T: Send>(
    points: &[Vector3<f64>],
    chunk: usize,
    threads: usize,
    f: impl Fn(&[Vector3<f64>]) -> Result<Vec<T>> + Sync,
) -> Result<Vec<T>> {
    let chunks: Vec<&[Vector3<f64>]> = points.chunks(chunk).collect();
    let per = chunks.len().div_ceil(threads.max(1)).max(1);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                let f = &f;
                s.spawn(move || -> Result<Vec<T>> {
                    let mut out = Vec::new();
                    for c in group {
                        out.extend(f(c)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(points.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn occupancy_grid(field: &SceneField, id: u16, grid: &ScalarGrid, cfg: &MeshConfig) -> Result<Vec<f64>> {
    map_chunks(&grid.points(), cfg.chunk, cfg.threads, |c| Ok(field.eval_geometry(id, c)?.occ))
}

fn to_u8(c: f64) -> u8 {
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Colours, and semantic labels when `label` is set, of vertices given the
/// head that produced them.
fn shade_vertices(
    field: &SceneField,
    vertices: &[Vector3<f64>],
    heads: &[u16],
    label: bool,
) -> Result<(Vec<[u8; 3]>, Vec<u16>)> {
    let mut colors = vec![[0u8; 3]; vertices.len()];
    let mut labels = heads.to_vec();
    let mut by_head: HashMap<u16, Vec<usize>> = HashMap::new();
    for (i, h) in heads.iter().enumerate() {
        by_head.entry(*h).or_default().push(i);
    }
    for (head, idx) in by_head {
        let pts: Vec<Vector3<f64>> = idx.iter().map(|i| vertices[*i]).collect();
        let latent = field.eval_geometry(head, &pts)?.latent;
        let pooled = Tensor::zeros(pts.len(), field.config.pooled_dim);
        let rgb = field.eval_color(&pts, &latent, &pooled)?;
        let sem = if label {
            Some(field.eval_semantic(&pts, &latent, &pooled)?)
        } else {
            None
        };
        for (r, i) in idx.iter().enumerate() {
            let c = rgb.row_slice(r);
            colors[*i] = [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])];
            if let Some(s) = &sem {
                let row = s.row_slice(r);
                let best = (0..row.len()).max_by(|a, b| row[*a].total_cmp(&row[*b])).expect("classes");
                labels[*i] = field.class_ids()[best];
            }
        }
    }
    Ok((colors, labels))
}

/// Grid over the field bounds with `resolution` cells along the longest side.
pub fn field_grid(field: &SceneField, resolution: usize) -> ScalarGrid {
    let b = field.bounds();
    let ext: Vec<f64> = (0..3).map(|a| b.max[a] - b.min[a]).collect();
    let h = ext.iter().cloned().fold(0.0, f64::max) / resolution as f64;
    let dims = [0, 1, 2].map(|a| (ext[a] / h + 1e-9).floor() as usize + 1);
    ScalarGrid {
        dims,
        origin: Vector3::new(b.min[0], b.min[1], b.min[2]),
        spacing: h,
        values: Vec::new(),
    }
}

/// Marching-cubes meshes of the field's occupancy at `cfg.iso`. Per-class
/// mode gives one mesh per registered class, in class order; merged mode
/// gives one mesh labelled by the semantic head.
pub fn extract_mesh(field: &SceneField, cfg: &MeshConfig, mode: MeshMode) -> Result<Vec<TriangleMesh>> {
    cfg.validate()?;
    let ids = field.class_ids().to_vec();
    if ids.is_empty() {
        return Err(Error::Config("field has no classes".into()));
    }
    let mut grid = field_grid(field, cfg.resolution);
    let occ: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| occupancy_grid(field, *id, &grid, cfg))
        .collect::<Result<_>>()?;
    match mode {
        MeshMode::PerClass => {
            let mut out = Vec::new();
            for (id, values) in ids.iter().zip(occ) {
                grid.values = values;
                let (v, t) = marching_cubes(&grid, cfg.iso);
                let mut mesh = TriangleMesh::uniform(v, t, *id, [0; 3]);
                mesh.cleanup();
                if mesh.is_empty() {
                    log::warn!("class {id} has an empty surface");
                } else {
                    let heads = vec![*id; mesh.vertices.len()];
                    mesh.colors = shade_vertices(field, &mesh.vertices, &heads, false)?.0;
                }
                out.push(mesh);
            }
            Ok(out)
        }
        MeshMode::Merged => {
            grid.values = (0..occ[0].len())
                .map(|i| occ.iter().map(|o| o[i]).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let (v, t) = marching_cubes(&grid, cfg.iso);
            let mut mesh = TriangleMesh::uniform(v, t, 0, [0; 3]);
            mesh.cleanup();
            if mesh.is_empty() {
                log::warn!("merged field has an empty surface");
                return Ok(vec![mesh]);
            }
            // Each vertex takes the head with the highest occupancy there.
            let per_head: Vec<Vec<f64>> = ids
                .iter()
                .map(|id| map_chunks(&mesh.vertices, cfg.chunk, cfg.threads, |c| Ok(field.eval_geometry(*id, c)?.occ)))
                .collect::<Result<_>>()?;
            let heads: Vec<u16> = (0..mesh.vertices.len())
                .map(|i| {
                    let best = (0..ids.len())
                        .max_by(|a, b| per_head[*a][i].total_cmp(&per_head[*b][i]))
                        .expect("classes");
                    ids[best]
                })
                .collect();
            let (colors, labels) = shade_vertices(field, &mesh.vertices, &heads, true)?;
            mesh.colors = colors;
            mesh.class_ids = labels;
            Ok(vec![mesh])
        }
    }
}

/// A camera that observed the scene, with its depth map when available.
#[derive(Clone, Copy, Debug)]
pub struct Observer<'a> {
    pub pose: Pose,
    pub frame: Option<&'a Frame>,
}

/// Whether any observer sees `p`: in front of the camera, inside the image,
/// and no more than `margin` behind the observed depth.
pub fn observed(p: &Vector3<f64>, observers: &[Observer], k: &Intrinsics, margin: f64) -> bool {
    observers.iter().any(|o| {
        let q = o.pose.inverse().transform_point(p);
        let Ok(px) = k.project(&q) else {
            return false;
        };
        if !k.contains(&px) {
            return false;
        }
        match o.frame {
            Some(f) => {
                let (x, y) = (px.x.round() as usize, px.y.round() as usize);
                match f.depth_at(x.min(f.width - 1), y.min(f.height - 1)) {
                    Some(d) => q.z <= d + margin,
                    None => true,
                }
            }
            None => true,
        }
    })
}

/// Removes vertices no observer saw.
pub fn cull_unobserved(mesh: &TriangleMesh, observers: &[Observer], k: &Intrinsics, margin: f64) -> TriangleMesh {
    let keep: Vec<bool> = mesh.vertices.iter().map(|v| observed(v, observers, k, margin)).collect();
    let mut out = mesh.clone();
    out.retain_vertices(&keep);
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshMetrics {
    /// Mean distance from predicted samples to the reference, cm.
    pub accuracy: f64,
    /// Mean distance from reference samples to the prediction, cm.
    pub completion: f64,
    /// Percentage of reference samples within the threshold.
    pub completion_ratio: f64,
}

/// Accuracy, completion and completion ratio from `n_samples` seeded
/// area-weighted samples on each surface. Both meshes are sampled from the
/// same seed, so identical meshes score exactly zero.
pub fn mesh_accuracy_completion(
    pred: &TriangleMesh,
    gt: &TriangleMesh,
    n_samples: usize,
    threshold_cm: f64,
    seed: u64,
) -> Result<MeshMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Shape("cannot compare an empty mesh".into()));
    }
    let ps = pred.sample_surface(n_samples, &mut ChaCha8Rng::seed_from_u64(seed));
    let gs = gt.sample_surface(n_samples, &mut ChaCha8Rng::seed_from_u64(seed));
    let (pt, gtree) = (KdTree::new(ps.clone()), KdTree::new(gs.clone()));
    let acc: Vec<f64> = ps.iter().map(|p| gtree.nearest_distance(p) * 100.0).collect();
    let comp: Vec<f64> = gs.iter().map(|g| pt.nearest_distance(g) * 100.0).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MeshMetrics {
        accuracy: mean(&acc),
        completion: mean(&comp),
        completion_ratio: 100.0 * comp.iter().filter(|d| **d < threshold_cm).count() as f64 / comp.len() as f64,
    })
}

fn albedo_u8(a: [f64; 3]) -> [u8; 3] {
    a.map(to_u8)
}

fn quad(m: &mut TriangleMesh, corners: [Vector3<f64>; 4]) {
    let off = m.vertices.len() as u32;
    m.vertices.extend_from_slice(&corners);
    m.triangles.push([off, off + 1, off + 2]);
    m.triangles.push([off, off + 2, off + 3]);
}

fn icosphere(subdivisions: usize) -> (Vec<Vector3<f64>>, Vec<[u32; 3]>) {
    let g = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vector3<f64>> = [
        (-1.0, g, 0.0),
        (1.0, g, 0.0),
        (-1.0, -g, 0.0),
        (1.0, -g, 0.0),
        (0.0, -1.0, g),
        (0.0, 1.0, g),
        (0.0, -1.0, -g),
        (0.0, 1.0, -g),
        (g, 0.0, -1.0),
        (g, 0.0, 1.0),
        (-g, 0.0, -1.0),
        (-g, 0.0, 1.0),
    ]
    .iter()
    .map(|(x, y, z)| Vector3::new(*x, *y, *z).normalize())
    .collect();
    let mut t: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut split = |a: u32, b: u32, v: &mut Vec<Vector3<f64>>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a as usize] + v[b as usize]) / 2.0).normalize());
                (v.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(t.len() * 4);
        for [a, b, c] in t {
            let ab = split(a, b, &mut v);
            let bc = split(b, c, &mut v);
            let ca = split(c, a, &mut v);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        t = next;
    }
    (v, t)
}

/// Exact surface of a synthetic scene, one mesh per class in class order.
/// Spheres are icospheres with `sphere_subdivisions` refinement steps.
pub fn scene_meshes(scene: &SyntheticScene, sphere_subdivisions: usize) -> Vec<TriangleMesh> {
    let mut by_class: std::collections::BTreeMap<u16, TriangleMesh> = Default::default();
    let r = &scene.room;
    let (lo, hi) = (r.min, r.max);
    let corner = |x: bool, y: bool, z: bool| {
        Vector3::new(if x { hi.x } else { lo.x }, if y { hi.y } else { lo.y }, if z { hi.z } else { lo.z })
    };
    let mut add = |class: u16, albedo: [f64; 3], build: &dyn Fn(&mut TriangleMesh)| {
        let mut m = TriangleMesh::default();
        build(&mut m);
        let n = m.vertices.len();
        m.class_ids = vec![class; n];
        m.colors = vec![albedo_u8(albedo); n];
        let entry = by_class.entry(class).or_default();
        *entry = TriangleMesh::merge(&[std::mem::take(entry), m]);
    };
    add(r.floor_class, r.floor_albedo, &|m| {
        quad(m, [corner(false, false, false), corner(true, false, false), corner(true, true, false), corner(false, true, false)])
    });
    add(r.ceiling_class, r.ceiling_albedo, &|m| {
        quad(m, [corner(false, false, true), corner(false, true, true), corner(true, true, true), corner(true, false, true)])
    });
    add(r.wall_class, r.wall_albedo, &|m| {
        quad(m, [corner(false, false, false), corner(false, true, false), corner(false, true, true), corner(false, false, true)]);
        quad(m, [corner(true, false, false), corner(true, false, true), corner(true, true, true), corner(true, true, false)]);
        quad(m, [corner(false, false, false), corner(false, false, true), corner(true, false, true), corner(true, false, false)]);
        quad(m, [corner(false, true, false), corner(true, true, false), corner(true, true, true), corner(false, true, true)]);
    });
    for p in &scene.primitives {
        let pose = p.pose;
        match p.shape {
            Shape::Cuboid { half_extent: e } => add(p.class_id, p.albedo, &|m| {
                let c = |x: f64, y: f64, z: f64| pose.transform_point(&Vector3::new(x * e.x, y * e.y, z * e.z));
                quad(m, [c(-1., -1., -1.), c(-1., 1., -1.), c(1., 1., -1.), c(1., -1., -1.)]);
                quad(m, [c(-1., -1., 1.), c(1., -1., 1.), c(1., 1., 1.), c(-1., 1., 1.)]);
                quad(m, [c(-1., -1., -1.), c(-1., -1., 1.), c(-1., 1., 1.), c(-1., 1., -1.)]);
                quad(m, [c(1., -1., -1.), c(1., 1., -1.), c(1., 1., 1.), c(1., -1., 1.)]);
                quad(m, [c(-1., -1., -1.), c(1., -1., -1.), c(1., -1., 1.), c(-1., -1., 1.)]);
                quad(m, [c(-1., 1., -1.), c(-1., 1., 1.), c(1., 1., 1.), c(1., 1., -1.)]);
            }),
            Shape::Sphere { radius } => add(p.class_id, p.albedo, &|m| {
                let (v, t) = icosphere(sphere_subdivisions);
                m.vertices = v.iter().map(|u| pose.transform_point(&(u * radius))).collect();
                m.triangles = t;
            }),
        }
    }
    by_class.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plate(z: f64) -> TriangleMesh {
        let mut m = TriangleMesh::default();
        quad(
            &mut m,
            [
                Vector3::new(0.0, 0.0, z),
                Vector3::new(1.0, 0.0, z),
                Vector3::new(1.0, 1.0, z),
                Vector3::new(0.0, 1.0, z),
            ],
        );
        m.class_ids = vec![0; 4];
        m.colors = vec![[0; 3]; 4];
        m
    }

    #[test]
    fn identical_meshes_score_zero() {
        let m = plate(0.0);
        let r = mesh_accuracy_completion(&m, &m, 5000, 5.0, 1).unwrap();
        assert_eq!((r.accuracy, r.completion, r.completion_ratio), (0.0, 0.0, 100.0));
    }

    #[test]
    fn shifted_plate() {
        let r = mesh_accuracy_completion(&plate(0.01), &plate(0.0), 20_000, 5.0, 2).unwrap();
        assert!((r.accuracy - 1.0).abs() < 0.1, "{r:?}");
        assert!((r.completion - 1.0).abs() < 0.1, "{r:?}");
        assert_eq!(r.completion_ratio, 100.0);
        let tight = mesh_accuracy_completion(&plate(0.01), &plate(0.0), 20_000, 0.5, 2).unwrap();
        assert!(tight.completion_ratio <= r.completion_ratio);
    }

    #[test]
    fn samples_are_area_weighted() {
        // Two plates, the second four times larger.
        let mut big = plate(1.0);
        for v in &mut big.vertices {
            v.x *= 2.0;
            v.y *= 2.0;
        }
        let m = TriangleMesh::merge(&[plate(0.0), big]);
        assert!((m.area() - 5.0).abs() < 1e-12);
        let s = m.sample_surface(20_000, &mut ChaCha8Rng::seed_from_u64(4));
        let upper = s.iter().filter(|p| p.z > 0.5).count() as f64 / s.len() as f64;
        assert!((upper - 0.8).abs() < 0.02, "{upper}");
    }

    #[test]
    fn cleanup_and_retain() {
        let mut m = plate(0.0);
        m.vertices.push(Vector3::zeros());
        m.class_ids.push(0);
        m.colors.push([0; 3]);
        m.triangles.push([0, 0, 1]);
        m.triangles.push([0, 4, 1]);
        m.cleanup();
        assert_eq!(m.triangles.len(), 2);
        assert_eq!(m.vertices.len(), 4);
        m.retain_vertices(&[true, true, true, false]);
        assert_eq!(m.triangles.len(), 1);
        assert_eq!(m.vertices.len(), 3);
        m.validate().unwrap();
    }

    #[test]
    fn scene_meshes_match_analytic_areas() {
        let scene = SyntheticScene::toy();
        let meshes = scene_meshes(&scene, 5);
        assert_eq!(meshes.len(), 5);
        let ids: Vec<u16> = meshes.iter().map(|m| m.class_ids[0]).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert!((meshes[0].area() - 4.0 * 9.0).abs() < 1e-9);
        assert!((meshes[1].area() - 9.0).abs() < 1e-9);
        let box_area = 8.0 * (0.18 * 0.14 + 0.14 * 0.2 + 0.18 * 0.2);
        assert!((meshes[3].area() - box_area).abs() < 1e-9);
        let sphere = 4.0 * std::f64::consts::PI * 0.18f64.powi(2);
        assert!((meshes[4].area() - sphere).abs() < 0.01 * sphere);
        // Every sampled surface point is a ray hit of the raycaster.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in &meshes {
            for p in m.sample_surface(50, &mut rng) {
                let o = Vector3::new(0.0, 0.0, 0.0);
                let d = (p - o).normalize();
                if let Some(h) = scene.intersect(&o, &d) {
                    assert!(h.t <= (p - o).norm() + 2e-3);
                }
            }
        }
    }

    #[test]
    fn culling_keeps_only_seen_vertices() {
        let k = Intrinsics::new(40.0, 40.0, 39.5, 29.5, 80, 60).unwrap();
        let pose = Pose::look_at(Vector3::new(0.0, 0.0, -2.0), Vector3::zeros(), Vector3::y());
        let mut m = plate(0.0);
        for v in &mut m.vertices {
            *v -= Vector3::new(0.5, 0.5, 0.0);
        }
        // A copy far off to the side.
        let mut side = m.clone();
        for v in &mut side.vertices {
            v.x += 20.0;
        }
        let both = TriangleMesh::merge(&[m.clone(), side]);
        let obs = [Observer { pose, frame: None }];
        let kept = cull_unobserved(&both, &obs, &k, 0.05);
        assert_eq!(kept.vertices.len(), 4);
        assert_eq!(kept.triangles.len(), 2);
    }
}
