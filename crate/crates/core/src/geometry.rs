//! Pinhole camera model, rigid poses and the local pose parametrization.
//!
//! Pixel coordinates are continuous with `(0, 0)` at the centre of the
//! top-left pixel. Camera axes follow the usual computer-vision convention:
//! `x` right, `y` down, `z` forward. Poses are camera-to-world.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹ (u, v, 1)`: the camera-frame direction through a pixel with unit z.
    pub fn ray_direction(&self, pixel: Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    pub fn project(&self, point_cam: &Vector3<f64>) -> Result<Vector2<f64>> {
        if point_cam.z <= 0.0 {
            return Err(Error::BehindCamera(point_cam.z));
        }
        Ok(Vector2::new(
            self.fx * point_cam.x / point_cam.z + self.cx,
            self.fy * point_cam.y / point_cam.z + self.cy,
        ))
    }

    pub fn backproject(&self, pixel: Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::InvalidDepth(depth));
        }
        Ok(self.ray_direction(pixel) * depth)
    }

    /// Whether a continuous pixel coordinate lies within the pixel-centre grid,
    /// up to round-off.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        const SLACK: f64 = 1e-9;
        pixel.x >= -SLACK
            && pixel.y >= -SLACK
            && pixel.x <= (self.width - 1) as f64 + SLACK
            && pixel.y <= (self.height - 1) as f64 + SLACK
    }
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Builds a pose from a rotation matrix whose columns are the camera
    /// axes expressed in world coordinates.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Camera placed at `eye` looking at `target`, with `up` as the world up
    /// direction.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_columns(&[right, down, forward]);
        Self::from_matrix(&r, eye)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        let mut out = Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        );
        out.renormalize();
        out
    }

    pub fn renormalize(&mut self) {
        self.rotation = UnitQuaternion::new_normalize(self.rotation.into_inner());
    }

    pub fn apply_delta(&self, delta: &PoseDelta) -> Self {
        delta.exp().compose(self)
    }

    /// Angle of the relative rotation between two poses, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.coords.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Local pose increment: rotation increment `ω` (axis-angle, radians)
/// followed by translation increment `v` (metres).
///
/// `exp` maps the twist to `[Exp(ω) | v]`, which is left-multiplied onto
/// the current estimate.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PoseDelta {
    pub twist: Vector6<f64>,
}

impl PoseDelta {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let mut twist = Vector6::zeros();
        twist.fixed_rows_mut::<3>(0).copy_from(&rotation);
        twist.fixed_rows_mut::<3>(3).copy_from(&translation);
        Self { twist }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            twist: Vector6::from_column_slice(&v[..6]),
        }
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.twist.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.twist.fixed_rows::<3>(3).into_owned()
    }

    pub fn exp(&self) -> Pose {
        Pose::new(
            UnitQuaternion::from_scaled_axis(self.rotation()),
            self.translation(),
        )
    }

    pub fn log(pose: &Pose) -> Self {
        Self::new(pose.rotation.scaled_axis(), pose.translation)
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of SO(3): `Exp(ω + δ) ≈ Exp(ω) Exp(J_r(ω) δ)`.
pub fn so3_right_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    if theta2 < 1e-12 {
        return Matrix3::identity() - 0.5 * w + (1.0 / 6.0) * w * w;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() - ((1.0 - theta.cos()) / theta2) * w
        + ((theta - theta.sin()) / (theta2 * theta)) * w * w
}

/// Jacobian of `Exp(ω) q + v` with respect to the twist `(ω, v)`, as a 3x6
/// row-major array.
pub fn delta_point_jacobian(delta: &PoseDelta, q: &Vector3<f64>) -> [[f64; 6]; 3] {
    let r = Rotation3::new(delta.rotation());
    let jr = so3_right_jacobian(&delta.rotation());
    let d_omega = -(r.matrix() * skew(q) * jr);
    let mut out = [[0.0; 6]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = d_omega[(i, j)];
        }
        out[i][3 + i] = 1.0;
    }
    out
}

/// Initial guess for the next pose assuming constant velocity:
/// `(prev ∘ prev2⁻¹) ∘ prev`.
pub fn constant_speed_guess(prev: &Pose, prev2: &Pose) -> Pose {
    prev.compose(&prev2.inverse()).compose(prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        Pose::new(UnitQuaternion::from_scaled_axis(axis * 2.0), t)
    }

    #[test]
    fn project_optical_axis_and_offset() {
        let p = k().project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vector2::new(50.0, 50.0));
        let p = k().project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(p.x, 100.0);
        assert!(matches!(
            k().project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn backproject_cases() {
        assert_eq!(
            k().backproject(Vector2::new(50.0, 50.0), 2.0).unwrap(),
            Vector3::new(0.0, 0.0, 2.0)
        );
        assert_eq!(
            k().backproject(Vector2::new(150.0, 50.0), 1.0).unwrap(),
            Vector3::new(1.0, 0.0, 1.0)
        );
        assert!(matches!(
            k().backproject(Vector2::new(1.0, 1.0), 0.0),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn project_backproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = k();
        for _ in 0..100 {
            let px = Vector2::new(rng.random_range(0.0..99.0), rng.random_range(0.0..99.0));
            let d = rng.random_range(0.1..10.0);
            let p = k.backproject(px, d).unwrap();
            let back = k.project(&p).unwrap();
            assert_abs_diff_eq!(back, px, epsilon = 1e-9);
            let p2 = k.backproject(back, p.z).unwrap();
            assert_abs_diff_eq!(p2, p, epsilon = 1e-9);
        }
    }

    #[test]
    fn transform_composition_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let p = Vector3::new(0.3, -1.2, 2.5);
            let lhs = a.transform_point(&b.transform_point(&p));
            let rhs = a.compose(&b).transform_point(&p);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
            // Matrix-product oracle.
            let m = a.rotation_matrix() * (b.rotation_matrix() * p + b.translation) + a.translation;
            assert_abs_diff_eq!(m, rhs, epsilon = 1e-9);
            let id = a.compose(&a.inverse());
            assert_abs_diff_eq!(id.translation, Vector3::zeros(), epsilon = 1e-9);
            assert!(id.rotation.angle() < 1e-9);
            assert!((a.rotation.norm() - 1.0).abs() < 1e-9);
        }
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform_point(&p), p);
        assert_eq!(
            Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)).transform_point(&Vector3::zeros()),
            Vector3::new(1.0, 0.0, 0.0)
        );
    }

    #[test]
    fn delta_exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(PoseDelta::zero().exp(), Pose::identity());
        for _ in 0..100 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let angle = rng.random_range(0.0..3.1);
            let d = PoseDelta::new(axis * angle, Vector3::new(0.1, -0.2, 0.3));
            let back = PoseDelta::log(&d.exp());
            assert_abs_diff_eq!(back.twist, d.twist, epsilon = 1e-9);
        }
    }

    #[test]
    fn apply_delta_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = random_pose(&mut rng);
        assert_eq!(pose.apply_delta(&PoseDelta::zero()), pose);
        let eps = 1e-3;
        let moved = pose.apply_delta(&PoseDelta::new(Vector3::zeros(), Vector3::new(0.0, 0.0, eps)));
        assert_abs_diff_eq!(moved.translation - pose.translation, Vector3::new(0.0, 0.0, eps), epsilon = 1e-12);
    }

    #[test]
    fn delta_point_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let d = PoseDelta::from_slice(&(0..6).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<_>>());
            let q = Vector3::new(rng.random_range(-2.0..2.0), 0.7, -1.1);
            let jac = delta_point_jacobian(&d, &q);
            for j in 0..6 {
                let h = 1e-6;
                let mut dp = d;
                dp.twist[j] += h;
                let mut dm = d;
                dm.twist[j] -= h;
                let fp = dp.exp().transform_point(&q);
                let fm = dm.exp().transform_point(&q);
                let fd = (fp - fm) / (2.0 * h);
                for i in 0..3 {
                    assert!((fd[i] - jac[i][j]).abs() < 1e-7, "{} vs {}", fd[i], jac[i][j]);
                }
            }
        }
    }

    #[test]
    fn constant_speed_cases() {
        let p = Pose::from_translation(Vector3::new(0.5, 0.1, 0.0));
        assert_abs_diff_eq!(constant_speed_guess(&p, &p).translation, p.translation, epsilon = 1e-12);
        let p0 = Pose::from_translation(Vector3::zeros());
        let p1 = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let g = constant_speed_guess(&p1, &p0);
        assert_abs_diff_eq!(g.translation, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);

        // Smooth trajectory: the guess is closer than the step itself.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let w = rng.random_range(0.01..0.2);
            let v = rng.random_range(0.01..0.2);
            let acc = rng.random_range(-0.002..0.002);
            let pose_at = |t: f64| {
                Pose::new(
                    UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, w * t + acc * t * t)),
                    Vector3::new(v * t + acc * t * t, 0.3 * v * t, 0.0),
                )
            };
            let g = constant_speed_guess(&pose_at(1.0), &pose_at(0.0));
            let truth = pose_at(2.0);
            let step = pose_at(1.0).translation_distance(&truth);
            assert!(g.translation_distance(&truth) < step);
        }
    }

    #[test]
    fn look_at_is_orthonormal() {
        let pose = Pose::look_at(Vector3::new(1.0, 0.0, 0.5), Vector3::zeros(), Vector3::z());
        let r = pose.rotation_matrix();
        assert_abs_diff_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-9);
        let fwd = pose.transform_vector(&Vector3::z());
        assert_abs_diff_eq!(fwd, (-Vector3::new(1.0, 0.0, 0.5)).normalize(), epsilon = 1e-12);
    }
}
