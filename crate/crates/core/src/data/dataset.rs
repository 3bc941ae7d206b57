//! Dataset directories on disk.
//!
//! * `synthetic-dump`: `rgb/%06d.png`, `depth/%06d.png` (16-bit mm),
//!   `semantic/%06d.png` (16-bit ids), `traj_gt.txt` (TUM), `intrinsics.txt`
//!   (`fx fy cx cy width height`).
//! * `replica-like`: `results/frame%06d.{jpg,png}`, `results/depth%06d.png`
//!   (depth scale 6553.5), `traj.txt` (row-major 4×4 per line),
//!   `intrinsics.txt`, optional `semantic/%06d.png`.
//! * `scannet-like`: `color/%d.jpg`, `depth/%d.png` (depth scale 1000),
//!   `pose/%d.txt` (4×4), `intrinsic/intrinsic_depth.txt` (4×4), optional
//!   `label-filt/%d.png`. Color is resized to the depth resolution.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use super::tum::{read_tum, write_tum};
use super::{Frame, UNLABELED};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    ReplicaLike,
    ScannetLike,
    SyntheticDump,
}

impl Layout {
    pub fn depth_scale(self) -> f64 {
        match self {
            Layout::ReplicaLike => 6553.5,
            Layout::ScannetLike | Layout::SyntheticDump => 1000.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// Sorted by timestamp.
    pub frames: Vec<Frame>,
    pub intrinsics: Intrinsics,
    pub gt_trajectory: Option<Vec<(f64, Pose)>>,
}

pub fn load_dataset(root: &Path, layout: Layout) -> Result<Dataset> {
    let mut ds = match layout {
        Layout::SyntheticDump => load_dump(root)?,
        Layout::ReplicaLike => load_replica(root)?,
        Layout::ScannetLike => load_scannet(root)?,
    };
    ds.frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    for f in &ds.frames {
        f.validate()?;
        if f.width != ds.intrinsics.width || f.height != ds.intrinsics.height {
            return Err(Error::Shape(format!(
                "frame {} is {}x{}, intrinsics say {}x{}",
                f.index, f.width, f.height, ds.intrinsics.width, ds.intrinsics.height
            )));
        }
    }
    if ds.frames.is_empty() {
        return Err(Error::MissingFile(root.join("<frames>")));
    }
    if ds.frames.iter().all(|f| f.gt_pose.is_some()) {
        ds.gt_trajectory = Some(ds.frames.iter().map(|f| (f.timestamp, f.gt_pose.unwrap())).collect());
    }
    Ok(ds)
}

fn load_dump(root: &Path) -> Result<Dataset> {
    let k = read_intrinsics(&root.join("intrinsics.txt"))?;
    let traj_path = root.join("traj_gt.txt");
    let traj = if traj_path.exists() { Some(read_tum(&traj_path)?) } else { None };
    let mut frames = Vec::new();
    for i in 0.. {
        let rgb_path = root.join(format!("rgb/{i:06}.png"));
        if !rgb_path.exists() {
            break;
        }
        let mut f = read_frame(
            &rgb_path,
            &root.join(format!("depth/{i:06}.png")),
            &root.join(format!("semantic/{i:06}.png")),
            1000.0,
            false,
        )?;
        f.index = i;
        f.timestamp = i as f64;
        if let Some((t, p)) = traj.as_ref().and_then(|t| t.get(i)) {
            f.timestamp = *t;
            f.gt_pose = Some(*p);
        }
        frames.push(f);
    }
    Ok(Dataset {
        frames,
        intrinsics: k,
        gt_trajectory: None,
    })
}

fn load_replica(root: &Path) -> Result<Dataset> {
    let k = read_intrinsics(&root.join("intrinsics.txt"))?;
    let traj_path = root.join("traj.txt");
    let poses = if traj_path.exists() { read_matrix_lines(&traj_path)? } else { Vec::new() };
    let mut frames = Vec::new();
    for i in 0.. {
        let rgb = ["jpg", "png"]
            .iter()
            .map(|ext| root.join(format!("results/frame{i:06}.{ext}")))
            .find(|p| p.exists());
        let Some(rgb) = rgb else { break };
        let mut f = read_frame(
            &rgb,
            &root.join(format!("results/depth{i:06}.png")),
            &root.join(format!("semantic/{i:06}.png")),
            Layout::ReplicaLike.depth_scale(),
            false,
        )?;
        f.index = i;
        f.timestamp = i as f64;
        f.gt_pose = poses.get(i).copied().flatten();
        frames.push(f);
    }
    Ok(Dataset {
        frames,
        intrinsics: k,
        gt_trajectory: None,
    })
}

fn load_scannet(root: &Path) -> Result<Dataset> {
    let kpath = root.join("intrinsic/intrinsic_depth.txt");
    let m = read_matrix_file(&kpath)?;
    let mut frames = Vec::new();
    let mut size = None;
    for i in 0.. {
        let depth = root.join(format!("depth/{i}.png"));
        if !depth.exists() {
            break;
        }
        let mut f = read_frame(
            &root.join(format!("color/{i}.jpg")),
            &depth,
            &root.join(format!("label-filt/{i}.png")),
            Layout::ScannetLike.depth_scale(),
            true,
        )?;
        f.index = i;
        f.timestamp = i as f64;
        let pose_path = root.join(format!("pose/{i}.txt"));
        if pose_path.exists() {
            f.gt_pose = matrix_to_pose(&read_matrix_file(&pose_path)?);
        }
        size.get_or_insert((f.width, f.height));
        frames.push(f);
    }
    let (w, h) = size.ok_or_else(|| Error::MissingFile(root.join("depth/0.png")))?;
    let k = Intrinsics::new(m[(0, 0)], m[(1, 1)], m[(0, 2)], m[(1, 2)], w, h)?;
    Ok(Dataset {
        frames,
        intrinsics: k,
        gt_trajectory: None,
    })
}

/// Reads one frame. With `resize_color`, color is resampled to the depth
/// resolution; otherwise sizes must agree.
fn read_frame(rgb: &Path, depth: &Path, semantic: &Path, depth_scale: f64, resize_color: bool) -> Result<Frame> {
    let d = open_image(depth)?.into_luma16();
    let (w, h) = (d.width() as usize, d.height() as usize);
    let mut c = open_image(rgb)?.into_rgb8();
    if (c.width() as usize, c.height() as usize) != (w, h) {
        if !resize_color {
            return Err(Error::malformed(rgb, 0, format!("color size differs from depth {w}x{h}")));
        }
        c = image::imageops::resize(&c, w as u32, h as u32, image::imageops::FilterType::Triangle);
    }
    let mut f = Frame::empty(w, h);
    f.rgb = c.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
    f.depth = d.as_raw().iter().map(|v| *v as f64 / depth_scale).collect();
    if semantic.exists() {
        let s = open_image(semantic)?.into_luma16();
        if (s.width() as usize, s.height() as usize) != (w, h) {
            return Err(Error::malformed(semantic, 0, format!("label size differs from depth {w}x{h}")));
        }
        f.semantic = s.into_raw();
    } else {
        f.semantic = vec![UNLABELED; w * h];
    }
    Ok(f)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| Error::malformed(path, 0, e.to_string()))
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    let text = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() != 6 {
        return Err(Error::malformed(path, 0, format!("expected 6 values, got {}", parts.len())));
    }
    let num = |i: usize| -> Result<f64> {
        parts[i]
            .parse()
            .map_err(|_| Error::malformed(path, byte_offset(&text, parts[i]), format!("bad number {:?}", parts[i])))
    };
    let int = |i: usize| -> Result<usize> {
        parts[i]
            .parse()
            .map_err(|_| Error::malformed(path, byte_offset(&text, parts[i]), format!("bad size {:?}", parts[i])))
    };
    Intrinsics::new(num(0)?, num(1)?, num(2)?, num(3)?, int(4)?, int(5)?)
}

fn byte_offset(text: &str, part: &str) -> u64 {
    (part.as_ptr() as usize - text.as_ptr() as usize) as u64
}

fn parse_numbers(path: &Path, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::malformed(path, byte_offset(text, p), format!("bad number {p:?}")))
        })
        .collect()
}

fn read_matrix_file(path: &Path) -> Result<Matrix4<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v = parse_numbers(path, &text)?;
    if v.len() != 16 {
        return Err(Error::malformed(path, 0, format!("expected 16 values, got {}", v.len())));
    }
    Ok(Matrix4::from_row_slice(&v))
}

fn read_matrix_lines(path: &Path) -> Result<Vec<Option<Pose>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v = parse_numbers(path, line).map_err(|e| match e {
            Error::Malformed { path, offset, reason } => Error::Malformed {
                path,
                offset: offset + byte_offset(&text, line),
                reason,
            },
            other => other,
        })?;
        if v.len() != 16 {
            return Err(Error::malformed(path, byte_offset(&text, line), format!("expected 16 values, got {}", v.len())));
        }
        out.push(matrix_to_pose(&Matrix4::from_row_slice(&v)));
    }
    Ok(out)
}

/// `None` for invalid (non-finite) poses, as some datasets mark lost frames.
fn matrix_to_pose(m: &Matrix4<f64>) -> Option<Pose> {
    if !m.iter().all(|v| v.is_finite()) {
        return None;
    }
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let svd = r.svd(true, true);
    let mut r = svd.u? * svd.v_t?;
    if r.determinant() < 0.0 {
        r = -r;
    }
    Some(Pose::from_matrix(&r, Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)])))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn save_err(path: PathBuf) -> impl FnOnce(image::ImageError) -> Error {
    move |e| Error::malformed(path, 0, e.to_string())
}

/// Writes one frame in the synthetic-dump layout. Depth is stored in whole
/// millimetres, so values must be below 65.535 m.
pub fn write_frame_dump(frame: &Frame, dir: &Path) -> Result<()> {
    frame.validate()?;
    for sub in ["rgb", "depth", "semantic"] {
        ensure_dir(&dir.join(sub))?;
    }
    let (w, h) = (frame.width as u32, frame.height as u32);
    let name = format!("{:06}.png", frame.index);

    let rgb: Vec<u8> = frame.rgb.iter().map(|c| (c * 255.0).round() as u8).collect();
    let path = dir.join("rgb").join(&name);
    ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, rgb)
        .expect("size")
        .save(&path)
        .map_err(save_err(path))?;

    let mut depth = Vec::with_capacity(frame.depth.len());
    for d in &frame.depth {
        let mm = (d * 1000.0).round();
        if mm > u16::MAX as f64 {
            return Err(Error::InvalidDepth(*d));
        }
        depth.push(mm as u16);
    }
    let path = dir.join("depth").join(&name);
    ImageBuffer::<Luma<u16>, _>::from_raw(w, h, depth)
        .expect("size")
        .save(&path)
        .map_err(save_err(path))?;

    let path = dir.join("semantic").join(&name);
    ImageBuffer::<Luma<u16>, _>::from_raw(w, h, frame.semantic.clone())
        .expect("size")
        .save(&path)
        .map_err(save_err(path))?;
    Ok(())
}

/// Writes frames, intrinsics and the ground-truth trajectory (if every frame
/// has a pose).
pub fn write_dump(frames: &[Frame], k: &Intrinsics, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_intrinsics(&dir.join("intrinsics.txt"), k)?;
    for f in frames {
        write_frame_dump(f, dir)?;
    }
    if frames.iter().all(|f| f.gt_pose.is_some()) {
        let traj: Vec<_> = frames.iter().map(|f| (f.timestamp, f.gt_pose.unwrap())).collect();
        write_tum(&dir.join("traj_gt.txt"), &traj)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Orbit, SyntheticScene};

    fn k() -> Intrinsics {
        Intrinsics::new(40.0, 40.0, 39.5, 29.5, 80, 60).unwrap()
    }

    fn toy_frames(n: usize) -> Vec<Frame> {
        let scene = SyntheticScene::toy();
        Orbit::toy()
            .poses(n)
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut f = scene.raycast(p, &k());
                f.index = i;
                f.timestamp = i as f64 * 0.1;
                f.quantize();
                f
            })
            .collect()
    }

    #[test]
    fn dump_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let frames = toy_frames(3);
        write_dump(&frames, &k(), dir.path()).unwrap();
        let ds = load_dataset(dir.path(), Layout::SyntheticDump).unwrap();
        assert_eq!(ds.intrinsics, k());
        assert_eq!(ds.frames.len(), 3);
        for (a, b) in frames.iter().zip(&ds.frames) {
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.semantic, b.semantic);
            assert_eq!(a.rgb, b.rgb);
            assert!(b.gt_pose.unwrap().translation_distance(&a.gt_pose.unwrap()) < 1e-8);
        }
        assert_eq!(ds.gt_trajectory.unwrap().len(), 3);
    }

    #[test]
    fn out_of_order_timestamps_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut frames = toy_frames(3);
        frames[0].timestamp = 5.0;
        write_dump(&frames, &k(), dir.path()).unwrap();
        let ds = load_dataset(dir.path(), Layout::SyntheticDump).unwrap();
        let order: Vec<usize> = ds.frames.iter().map(|f| f.index).collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    #[test]
    fn replica_layout_depth_scale_and_missing_labels() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("results")).unwrap();
        write_intrinsics(&root.join("intrinsics.txt"), &Intrinsics::new(2.0, 2.0, 1.0, 1.0, 3, 2).unwrap()).unwrap();
        ImageBuffer::<Rgb<u8>, _>::from_raw(3, 2, vec![10u8; 18]).unwrap().save(root.join("results/frame000000.png")).unwrap();
        ImageBuffer::<Luma<u16>, _>::from_raw(3, 2, vec![13107u16, 0, 6553, 1, 2, 3])
            .unwrap()
            .save(root.join("results/depth000000.png"))
            .unwrap();
        std::fs::write(root.join("traj.txt"), "1 0 0 0.5 0 1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
        let ds = load_dataset(root, Layout::ReplicaLike).unwrap();
        let f = &ds.frames[0];
        assert_eq!(f.depth[0], 2.0);
        assert_eq!(f.depth_at(1, 0), None);
        assert!(f.semantic.iter().all(|s| *s == UNLABELED));
        assert_eq!(f.gt_pose.unwrap().translation.x, 0.5);
    }

    #[test]
    fn scannet_layout_scale_1000() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for sub in ["color", "depth", "pose", "intrinsic"] {
            std::fs::create_dir_all(root.join(sub)).unwrap();
        }
        std::fs::write(root.join("intrinsic/intrinsic_depth.txt"), "5 0 2 0\n0 5 1.5 0\n0 0 1 0\n0 0 0 1\n").unwrap();
        image::RgbImage::from_raw(8, 6, vec![200u8; 144]).unwrap().save(root.join("color/0.jpg")).unwrap();
        ImageBuffer::<Luma<u16>, _>::from_raw(4, 3, vec![2000u16; 12]).unwrap().save(root.join("depth/0.png")).unwrap();
        std::fs::write(root.join("pose/0.txt"), "-inf -inf -inf -inf\n-inf -inf -inf -inf\n-inf -inf -inf -inf\n-inf -inf -inf -inf\n").unwrap();
        let ds = load_dataset(root, Layout::ScannetLike).unwrap();
        assert_eq!(ds.intrinsics.width, 4);
        assert_eq!(ds.frames[0].depth[5], 2.0);
        assert!(ds.frames[0].gt_pose.is_none());
        assert!(ds.gt_trajectory.is_none());
    }

    #[test]
    fn malformed_inputs_name_file_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        assert!(matches!(load_dataset(root, Layout::SyntheticDump), Err(Error::MissingFile(_))));
        std::fs::write(root.join("intrinsics.txt"), "40 40 x 29.5 80 60").unwrap();
        match load_dataset(root, Layout::SyntheticDump) {
            Err(Error::Malformed { path, offset, .. }) => {
                assert!(path.ends_with("intrinsics.txt"));
                assert_eq!(offset, 6);
            }
            other => panic!("{other:?}"),
        }
        write_intrinsics(&root.join("intrinsics.txt"), &k()).unwrap();
        std::fs::create_dir_all(root.join("rgb")).unwrap();
        std::fs::write(root.join("rgb/000000.png"), b"not a png").unwrap();
        assert!(matches!(load_dataset(root, Layout::SyntheticDump), Err(Error::MissingFile(_))));
        std::fs::create_dir_all(root.join("depth")).unwrap();
        std::fs::write(root.join("depth/000000.png"), b"not a png either").unwrap();
        match load_dataset(root, Layout::SyntheticDump) {
            Err(Error::Malformed { path, .. }) => assert!(path.ends_with("depth/000000.png")),
            other => panic!("{other:?}"),
        }
    }
}
