//! TUM trajectory text files: `timestamp tx ty tz qx qy qz qw` per line.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;

pub type TrajectoryEntry = (f64, Pose);

/// Formats like C's `%.9g`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..9).contains(&exp) {
        let s = format!("{x:.8e}");
        let (mantissa, e) = s.split_once('e').expect("exponent");
        let e: i32 = e.parse().expect("exponent");
        return format!("{}e{}{:02}", trim_zeros(mantissa), if e < 0 { '-' } else { '+' }, e.abs());
    }
    let s = trim_zeros(&format!("{x:.*}", (8 - exp).max(0) as usize));
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn write_tum(path: &Path, entries: &[TrajectoryEntry]) -> Result<()> {
    let mut out = String::new();
    for (t, p) in entries {
        let q = p.rotation.coords;
        let v = [t, &p.translation.x, &p.translation.y, &p.translation.z, &q.x, &q.y, &q.z, &q.w];
        let line: Vec<String> = v.iter().map(|x| format_sig9(**x)).collect();
        writeln!(out, "{}", line.join(" ")).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a TUM file, skipping blank and `#` lines. Entries keep file order.
pub fn read_tum(path: &Path) -> Result<Vec<TrajectoryEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let v: Vec<f64> = trimmed
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::malformed(path, offset, format!("bad number: {e}")))?;
            if v.len() != 8 {
                return Err(Error::malformed(path, offset, format!("expected 8 fields, got {}", v.len())));
            }
            let q = Quaternion::new(v[7], v[4], v[5], v[6]);
            if !(q.norm() > 0.0) {
                return Err(Error::malformed(path, offset, "zero quaternion"));
            }
            out.push((
                v[0],
                Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3])),
            ));
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(-0.5), "-0.5");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123.456789012), "123.456789");
        assert_eq!(format_sig9(1.5e-7), "1.5e-07");
        assert_eq!(format_sig9(2.0e12), "2e+12");
        for x in [0.123456789, -7.5, 1e-3, 12345.678912] {
            let y: f64 = format_sig9(x).parse().unwrap();
            assert!((x - y).abs() <= 1e-8 * x.abs());
        }
    }

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let p = Pose::new(
            UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3),
            Vector3::new(1.0, -2.5, 0.125),
        );
        write_tum(&path, &[(0.0, Pose::identity()), (1.5, p)]).unwrap();
        let back = read_tum(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, 1.5);
        assert!(back[1].1.translation_distance(&p) < 1e-8);
        assert!(back[1].1.rotation_angle_to(&p) < 1e-8);

        std::fs::write(&path, "# header\n0 0 0 0 0 0 0 1\n1 0 0 x 0 0 0 1\n").unwrap();
        match read_tum(&path) {
            Err(Error::Malformed { offset, .. }) => assert_eq!(offset, 25),
            other => panic!("{other:?}"),
        }
    }
}
