use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Timestamped poses with strictly increasing timestamps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self> {
        if let Some(w) = entries.windows(2).find(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Config(format!(
                "trajectory timestamps must increase ({} then {})",
                w[0].0, w[1].0
            )));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.entries.iter().map(|(_, p)| *p).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// ATE RMSE in centimetres against `gt`, associated by index.
    pub fn ate_rmse(&self, gt: &Trajectory) -> Result<f64> {
        ate_rmse(&self.poses(), &gt.poses())
    }
}

/// Rigid transform `T` minimizing `sum |gt_i - T est_i|^2` over camera
/// positions, associated by index.
pub fn umeyama_align(est: &[Pose], gt: &[Pose]) -> Result<Pose> {
    let e: Vec<Vector3<f64>> = est.iter().map(|p| p.translation).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|p| p.translation).collect();
    align_points(&e, &g)
}

pub fn align_points(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Pose> {
    if est.len() != gt.len() {
        return Err(Error::Shape(format!(
            "trajectories differ in length ({} vs {})",
            est.len(),
            gt.len()
        )));
    }
    if est.len() < 3 {
        return Err(Error::RankDeficient(format!("need at least 3 poses, got {}", est.len())));
    }
    let n = est.len() as f64;
    let me = est.iter().sum::<Vector3<f64>>() / n;
    let mg = gt.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        cov += (g - mg) * (e - me).transpose();
        spread += (e - me) * (e - me).transpose();
    }
    cov /= n;
    spread /= n;
    let sv = spread.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::RankDeficient("estimated positions are collinear".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let t = mg - r * me;
    Ok(Pose::from_matrix(&r, t))
}

/// Root-mean-square position error after rigid alignment, in centimetres.
pub fn ate_rmse(est: &[Pose], gt: &[Pose]) -> Result<f64> {
    let align = umeyama_align(est, gt)?;
    let sq: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (align.transform_point(&e.translation) - g.translation).norm_squared())
        .sum();
    Ok((sq / est.len() as f64).sqrt() * 100.0)
}
