use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::mesh::TriangleMesh;
use crate::error::{Error, Result};

const VERTEX_PROPS: [&str; 7] = [
    "property double x",
    "property double y",
    "property double z",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
    "property ushort class_id",
];
const FACE_PROP: &str = "property list uchar int vertex_indices";

/// Writes a binary little-endian PLY with per-vertex colour and class id.
pub fn write_ply(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    mesh.validate()?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str("comment class_id is the semantic class of each vertex\n");
    header.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    for p in VERTEX_PROPS {
        header.push_str(p);
        header.push('\n');
    }
    header.push_str(&format!("element face {}\n{FACE_PROP}\nend_header\n", mesh.triangles.len()));
    w.write_all(header.as_bytes()).map_err(io)?;
    for i in 0..mesh.vertices.len() {
        let v = mesh.vertices[i];
        for c in [v.x, v.y, v.z] {
            w.write_all(&c.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&mesh.colors[i]).map_err(io)?;
        w.write_all(&mesh.class_ids[i].to_le_bytes()).map_err(io)?;
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8]).map_err(io)?;
        for i in t {
            w.write_all(&(*i as i32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a PLY written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<TriangleMesh> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let mut next_line = |r: &mut BufReader<File>| -> Result<(u64, String)> {
        let mut line = String::new();
        let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::malformed(path, offset, "unexpected end of header"));
        }
        let at = offset;
        offset += n as u64;
        Ok((at, line.trim_end().to_string()))
    };
    let expect = |got: (u64, String), want: &str| -> Result<()> {
        if got.1 == want {
            Ok(())
        } else {
            Err(Error::malformed(path, got.0, format!("expected `{want}`, found `{}`", got.1)))
        }
    };
    expect(next_line(&mut r)?, "ply")?;
    expect(next_line(&mut r)?, "format binary_little_endian 1.0")?;
    let mut line = next_line(&mut r)?;
    while line.1.starts_with("comment") {
        line = next_line(&mut r)?;
    }
    let count = |l: &(u64, String), element: &str| -> Result<usize> {
        l.1.strip_prefix(&format!("element {element} "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::malformed(path, l.0, format!("expected `element {element} N`")))
    };
    let nv = count(&line, "vertex")?;
    for p in VERTEX_PROPS {
        expect(next_line(&mut r)?, p)?;
    }
    let nf = count(&next_line(&mut r)?, "face")?;
    expect(next_line(&mut r)?, FACE_PROP)?;
    expect(next_line(&mut r)?, "end_header")?;

    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    let header_len = offset;
    let need = nv * 29 + nf * 13;
    if body.len() != need {
        return Err(Error::malformed(
            path,
            header_len,
            format!("body has {} bytes, expected {need}", body.len()),
        ));
    }
    let f64_at = |o: usize| f64::from_le_bytes(body[o..o + 8].try_into().expect("8 bytes"));
    let mut mesh = TriangleMesh::default();
    for i in 0..nv {
        let o = i * 29;
        mesh.vertices.push(Vector3::new(f64_at(o), f64_at(o + 8), f64_at(o + 16)));
        mesh.colors.push([body[o + 24], body[o + 25], body[o + 26]]);
        mesh.class_ids.push(u16::from_le_bytes([body[o + 27], body[o + 28]]));
    }
    for f in 0..nf {
        let o = nv * 29 + f * 13;
        if body[o] != 3 {
            return Err(Error::malformed(path, header_len + o as u64, "face is not a triangle"));
        }
        let idx: [u32; 3] = std::array::from_fn(|m| {
            let s = o + 1 + 4 * m;
            i32::from_le_bytes(body[s..s + 4].try_into().expect("4 bytes")) as u32
        });
        mesh.triangles.push(idx);
    }
    mesh.validate()
        .map_err(|e| Error::malformed(path, header_len, e.to_string()))?;
    Ok(mesh)
}
