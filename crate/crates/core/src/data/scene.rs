//! Analytic labeled scene used as ground truth: a box room plus cuboids and
//! spheres, lambertian shading, exact z-depth.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use nalgebra::{UnitQuaternion, Vector2, Vector3};

use super::Frame;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};

const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Cuboid { half_extent: Vector3<f64> },
    Sphere { radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// Object-to-world.
    pub pose: Pose,
    pub class_id: u16,
    pub albedo: [f64; 3],
}

/// Axis-aligned room seen from inside. Walls, floor and ceiling carry their
/// own classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Room {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub wall_class: u16,
    pub floor_class: u16,
    pub ceiling_class: u16,
    pub wall_albedo: [f64; 3],
    pub floor_albedo: [f64; 3],
    pub ceiling_albedo: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Light {
    pub ambient: f64,
    pub diffuse: f64,
    /// Unit vector pointing towards the light.
    pub direction: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub room: Room,
    pub primitives: Vec<Primitive>,
    pub light: Light,
    /// Amplitude of the smooth albedo pattern; 0 gives flat albedo.
    pub texture_amplitude: f64,
    pub texture_period: f64,
}

/// Closest surface along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals z-depth for `direction = R K⁻¹ (u, v, 1)`.
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub class_id: u16,
    pub albedo: [f64; 3],
}

impl SyntheticScene {
    /// 3 m room (walls 0, floor 1, ceiling 2) with a box (3) and a sphere (4)
    /// near the centre.
    pub fn toy() -> Self {
        Self {
            room: Room {
                min: Vector3::new(-1.5, -1.5, -1.5),
                max: Vector3::new(1.5, 1.5, 1.5),
                wall_class: 0,
                floor_class: 1,
                ceiling_class: 2,
                wall_albedo: [0.75, 0.7, 0.6],
                floor_albedo: [0.45, 0.35, 0.3],
                ceiling_albedo: [0.9, 0.9, 0.95],
            },
            primitives: vec![
                Primitive {
                    shape: Shape::Cuboid {
                        half_extent: Vector3::new(0.18, 0.14, 0.2),
                    },
                    pose: Pose::new(
                        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.3),
                        Vector3::new(0.15, -0.1, -0.25),
                    ),
                    class_id: 3,
                    albedo: [0.2, 0.45, 0.8],
                },
                Primitive {
                    shape: Shape::Sphere { radius: 0.18 },
                    pose: Pose::from_translation(Vector3::new(-0.15, 0.15, 0.2)),
                    class_id: 4,
                    albedo: [0.85, 0.3, 0.2],
                },
            ],
            light: Light {
                ambient: 0.35,
                diffuse: 0.65,
                direction: Vector3::new(0.3, 0.2, 1.0).normalize(),
            },
            texture_amplitude: 0.15,
            texture_period: 0.5,
        }
    }

    pub fn class_ids(&self) -> BTreeSet<u16> {
        let mut ids: BTreeSet<u16> = [self.room.wall_class, self.room.floor_class, self.room.ceiling_class].into();
        ids.extend(self.primitives.iter().map(|p| p.class_id));
        ids
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|a| self.room.min[a] >= self.room.max[a]) {
            return Err(Error::Config("room has non-positive extent".into()));
        }
        for p in &self.primitives {
            let ok = match p.shape {
                Shape::Cuboid { half_extent } => half_extent.iter().all(|h| *h > 0.0),
                Shape::Sphere { radius } => radius > 0.0,
            };
            if !ok {
                return Err(Error::Config(format!("degenerate primitive of class {}", p.class_id)));
            }
        }
        let ids = self.class_ids();
        if ids.iter().copied().ne(0..ids.len() as u16) {
            return Err(Error::Config(format!("class ids must be dense from 0, got {ids:?}")));
        }
        Ok(())
    }

    /// Room diagonal, used to normalize depth errors.
    pub fn diameter(&self) -> f64 {
        (self.room.max - self.room.min).norm()
    }

    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best = self.intersect_room(origin, dir);
        for p in &self.primitives {
            if let Some(h) = intersect_primitive(p, origin, dir) {
                if best.is_none_or(|b| h.t < b.t) {
                    best = Some(h);
                }
            }
        }
        best
    }

    fn intersect_room(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let r = &self.room;
        let mut best: Option<(f64, usize)> = None;
        for a in 0..3 {
            if d[a].abs() < EPS {
                continue;
            }
            let plane = if d[a] > 0.0 { r.max[a] } else { r.min[a] };
            let t = (plane - o[a]) / d[a];
            if t > EPS && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, a));
            }
        }
        let (t, a) = best?;
        let mut normal = Vector3::zeros();
        normal[a] = -d[a].signum();
        let (class_id, albedo) = match (a, d[a] > 0.0) {
            (2, false) => (r.floor_class, r.floor_albedo),
            (2, true) => (r.ceiling_class, r.ceiling_albedo),
            _ => (r.wall_class, r.wall_albedo),
        };
        Some(Hit {
            t,
            point: o + t * d,
            normal,
            class_id,
            albedo,
        })
    }

    pub fn shade(&self, hit: &Hit) -> [f64; 3] {
        let p = hit.point;
        let k = TAU / self.texture_period;
        let pattern = ((k * p.x).sin() + (k * p.y).sin() + (k * p.z).sin()) / 3.0;
        let tex = 1.0 - self.texture_amplitude + self.texture_amplitude * pattern;
        let light = self.light.ambient + self.light.diffuse * hit.normal.dot(&self.light.direction).max(0.0);
        hit.albedo.map(|a| (a * tex * light).clamp(0.0, 1.0))
    }

    /// Renders one frame per pose, `dt` seconds apart.
    pub fn render_sequence(&self, poses: &[Pose], k: &Intrinsics, dt: f64) -> Vec<Frame> {
        poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut f = self.raycast(p, k);
                f.index = i;
                f.timestamp = i as f64 * dt;
                f
            })
            .collect()
    }

    /// Renders RGB, z-depth and labels. Rays that miss everything give a hole.
    pub fn raycast(&self, pose: &Pose, k: &Intrinsics) -> Frame {
        let (w, h) = (k.width, k.height);
        let mut frame = Frame::empty(w, h);
        frame.gt_pose = Some(*pose);
        for y in 0..h {
            for x in 0..w {
                let dir = pose.transform_vector(&k.ray_direction(Vector2::new(x as f64, y as f64)));
                let i = y * w + x;
                if let Some(hit) = self.intersect(&pose.translation, &dir) {
                    frame.depth[i] = hit.t;
                    frame.semantic[i] = hit.class_id;
                    frame.rgb[3 * i..3 * i + 3].copy_from_slice(&self.shade(&hit));
                }
            }
        }
        frame
    }
}

fn intersect_primitive(p: &Primitive, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let inv = p.pose.inverse();
    let ol = inv.transform_point(o);
    let dl = inv.transform_vector(d);
    let (t, nl) = match p.shape {
        Shape::Sphere { radius } => {
            let a = dl.dot(&dl);
            let b = 2.0 * dl.dot(&ol);
            let c = ol.dot(&ol) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if t <= EPS {
                return None;
            }
            (t, (ol + t * dl) / radius)
        }
        Shape::Cuboid { half_extent } => {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut axis = 0;
            for a in 0..3 {
                if dl[a].abs() < EPS {
                    if ol[a].abs() > half_extent[a] {
                        return None;
                    }
                    continue;
                }
                let t1 = (-half_extent[a] - ol[a]) / dl[a];
                let t2 = (half_extent[a] - ol[a]) / dl[a];
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                if lo > t_near {
                    t_near = lo;
                    axis = a;
                }
                t_far = t_far.min(hi);
            }
            if t_near > t_far || t_near <= EPS {
                return None;
            }
            let mut n = Vector3::zeros();
            n[axis] = -dl[axis].signum();
            (t_near, n)
        }
    };
    Some(Hit {
        t,
        point: o + t * d,
        normal: p.pose.transform_vector(&nl).normalize(),
        class_id: p.class_id,
        albedo: p.albedo,
    })
}

/// 80x60 pinhole camera with a 90 degree horizontal field of view.
pub fn toy_intrinsics() -> Intrinsics {
    Intrinsics::new(40.0, 40.0, 39.5, 29.5, 80, 60).expect("valid intrinsics")
}

/// The toy scene seen from `n` frames of the toy orbit.
pub fn toy_sequence(n: usize) -> (Vec<Frame>, Intrinsics) {
    let k = toy_intrinsics();
    (SyntheticScene::toy().render_sequence(&Orbit::toy().poses(n), &k, 0.1), k)
}

/// Circular camera path looking at a fixed target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Orbit {
    pub center: Vector3<f64>,
    pub radius: f64,
    /// Camera height relative to `center`.
    pub height: f64,
    pub target: Vector3<f64>,
    pub start_angle: f64,
    /// Angle swept over the whole trajectory.
    pub arc: f64,
}

impl Orbit {
    /// Orbit used by the toy experiments: a quarter circle of radius 1 m.
    pub fn toy() -> Self {
        Self {
            center: Vector3::zeros(),
            radius: 1.0,
            height: 0.0,
            target: Vector3::zeros(),
            start_angle: 0.0,
            arc: TAU / 4.0,
        }
    }

    pub fn poses(&self, n: usize) -> Vec<Pose> {
        let step = self.arc / n.max(1) as f64;
        (0..n)
            .map(|i| {
                let a = self.start_angle + step * i as f64;
                let eye = self.center + Vector3::new(self.radius * a.cos(), self.radius * a.sin(), self.height);
                Pose::look_at(eye, self.target, Vector3::z())
            })
            .collect()
    }
}

/// Full circle around `center` at its height, looking at it.
pub fn orbit_trajectory(center: Vector3<f64>, radius: f64, n_frames: usize) -> Vec<Pose> {
    Orbit {
        center,
        radius,
        height: 0.0,
        target: center,
        start_angle: 0.0,
        arc: TAU,
    }
    .poses(n_frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics::new(40.0, 40.0, 39.5, 29.5, 80, 60).unwrap()
    }

    #[test]
    fn toy_scene_is_valid() {
        let s = SyntheticScene::toy();
        s.validate().unwrap();
        assert_eq!(s.class_ids().len(), 5);
        let mut bad = s.clone();
        bad.primitives[1].class_id = 9;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn wall_depth_is_exact() {
        let mut s = SyntheticScene::toy();
        s.primitives.clear();
        // Camera at x = -0.5 facing +x: wall at 2 m.
        let pose = Pose::look_at(Vector3::new(-0.5, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::z());
        let k = Intrinsics::new(40.0, 40.0, 40.0, 30.0, 81, 61).unwrap();
        let f = s.raycast(&pose, &k);
        assert_eq!(f.depth_at(40, 30), Some(2.0));
        // Off-centre pixels keep z-depth 2 on a fronto-parallel wall.
        assert!((f.depth_at(50, 20).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(f.class_at(40, 30), 0);
    }

    #[test]
    fn sphere_depth_matches_quadratic() {
        let s = SyntheticScene::toy();
        let pose = Orbit::toy().poses(20)[3];
        let f = s.raycast(&pose, &k());
        let c = Vector3::new(-0.15, 0.15, 0.2);
        let mut checked = 0;
        for y in 0..60 {
            for x in 0..80 {
                if f.class_at(x, y) != 4 {
                    continue;
                }
                let d = pose.transform_vector(&k().ray_direction(Vector2::new(x as f64, y as f64)));
                let oc = pose.translation - c;
                let (a, b, cc) = (d.dot(&d), 2.0 * d.dot(&oc), oc.dot(&oc) - 0.18 * 0.18);
                let t = (-b - (b * b - 4.0 * a * cc).sqrt()) / (2.0 * a);
                assert!((f.depth_at(x, y).unwrap() - t).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn toy_views_see_every_class() {
        let s = SyntheticScene::toy();
        let mut seen = BTreeSet::new();
        for pose in Orbit::toy().poses(20) {
            let f = s.raycast(&pose, &k());
            assert!(f.depth.iter().all(|d| *d > 0.0));
            seen.extend(f.classes_present());
        }
        assert_eq!(seen, s.class_ids());
        let first = s.raycast(&Orbit::toy().poses(20)[0], &k());
        for id in [0, 3, 4] {
            assert!(first.classes_present().contains(&id));
        }
    }

    #[test]
    fn raycast_is_deterministic() {
        let s = SyntheticScene::toy();
        let pose = Orbit::toy().poses(20)[7];
        assert_eq!(s.raycast(&pose, &k()), s.raycast(&pose, &k()));
    }

    #[test]
    fn orbit_properties() {
        let poses = orbit_trajectory(Vector3::new(0.0, 0.0, 0.5), 1.0, 4);
        let want = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
        for (p, (x, y)) in poses.iter().zip(want) {
            assert!((p.translation - Vector3::new(x, y, 0.5)).norm() < 1e-12);
        }
        let poses = Orbit::toy().poses(20);
        let rel0 = poses[1].compose(&poses[0].inverse());
        for w in poses.windows(2) {
            let rel = w[1].compose(&w[0].inverse());
            assert!(rel.translation_distance(&rel0) < 1e-9);
            assert!(rel.rotation_angle_to(&rel0) < 1e-9);
            let r = w[1].rotation_matrix();
            assert!((r * r.transpose() - nalgebra::Matrix3::identity()).norm() < 1e-9);
        }
    }
}
