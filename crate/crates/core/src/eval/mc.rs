//! Marching cubes on a regular scalar grid.
//!
//! Instead of a precomputed case table, each active cell traces the closed
//! loops formed by the iso-crossings on its six faces. Faces with four
//! crossings are resolved from the face-centre value, which neighbouring
//! cells share, so the output is crack-free. Triangles are wound so their
//! normals point towards decreasing values.

use std::collections::HashMap;

use nalgebra::Vector3;

/// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Corners of each face in cyclic order.
const FACES: [[usize; 4]; 6] = [
    [0, 2, 6, 4],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 3, 7, 6],
    [0, 1, 3, 2],
    [4, 5, 7, 6],
];

fn edge_between(a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    EDGES.iter().position(|e| *e == key).expect("cube edge")
}

fn corner_offset(c: usize) -> Vector3<f64> {
    Vector3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64)
}

/// Dense scalar samples on a regular grid, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    pub dims: [usize; 3],
    pub origin: Vector3<f64>,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn from_fn(dims: [usize; 3], origin: Vector3<f64>, spacing: f64, f: impl Fn(&Vector3<f64>) -> f64) -> Self {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    values.push(f(&(origin + spacing * Vector3::new(i as f64, j as f64, k as f64))));
                }
            }
        }
        Self {
            dims,
            origin,
            spacing,
            values,
        }
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + self.spacing * Vector3::new(i as f64, j as f64, k as f64)
    }

    /// All grid points in storage order.
    pub fn points(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(self.values.len());
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    out.push(self.point(i, j, k));
                }
            }
        }
        out
    }
}

/// Vertices and triangles of the `iso` level set; values above `iso` count as
/// inside.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> (Vec<Vector3<f64>>, Vec<[u32; 3]>) {
    let [nx, ny, nz] = grid.dims;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut edge_vertex: HashMap<(usize, u8), u32> = HashMap::new();
    if nx < 2 || ny < 2 || nz < 2 {
        return (vertices, triangles);
    }
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut v = [0.0; 8];
                let mut base = [0usize; 8];
                for (c, slot) in v.iter_mut().enumerate() {
                    let idx = grid.index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                    base[c] = idx;
                    *slot = grid.values[idx];
                }
                let inside: [bool; 8] = std::array::from_fn(|c| v[c] > iso);
                if inside.iter().all(|b| *b) || inside.iter().all(|b| !*b) {
                    continue;
                }
                let corner0 = grid.point(i, j, k);
                let loops = cell_loops(&v, &inside, iso);
                for lp in loops {
                    let ids: Vec<u32> = lp
                        .iter()
                        .map(|e| {
                            let (a, b) = EDGES[*e];
                            let axis = (a ^ b).trailing_zeros() as u8;
                            *edge_vertex.entry((base[a], axis)).or_insert_with(|| {
                                let t = (iso - v[a]) / (v[b] - v[a]);
                                let p = corner_offset(a) + t * (corner_offset(b) - corner_offset(a));
                                vertices.push(corner0 + grid.spacing * p);
                                (vertices.len() - 1) as u32
                            })
                        })
                        .collect();
                    triangles.extend(triangulate(&ids, &mut vertices));
                }
            }
        }
    }
    (vertices, triangles)
}

/// Outward normal of each face in `FACES`.
const FACE_NORMALS: [[f64; 3]; 6] = [
    [-1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, -1.0],
    [0.0, 0.0, 1.0],
];

fn edge_mid(e: usize) -> Vector3<f64> {
    (corner_offset(EDGES[e].0) + corner_offset(EDGES[e].1)) / 2.0
}

/// Closed loops of active cube edges, each wound so that its normal points
/// from the inside corners to the outside ones.
fn cell_loops(v: &[f64; 8], inside: &[bool; 8], iso: f64) -> Vec<Vec<usize>> {
    let active = |e: usize| inside[EDGES[e].0] != inside[EDGES[e].1];
    // Per edge: (face, neighbouring edge, in-face direction towards the
    // outside side of the segment).
    let mut adj: Vec<Vec<(usize, usize, Vector3<f64>)>> = vec![Vec::new(); 12];
    for (f, corners) in FACES.iter().enumerate() {
        let fe: [usize; 4] = std::array::from_fn(|m| edge_between(corners[m], corners[(m + 1) % 4]));
        let act: Vec<usize> = (0..4).filter(|m| active(fe[*m])).collect();
        let mut pair = |a: usize, b: usize, out: Vector3<f64>| {
            adj[a].push((f, b, out));
            adj[b].push((f, a, out));
        };
        let centroid = |sel: &dyn Fn(usize) -> bool| {
            let pts: Vec<Vector3<f64>> = corners.iter().filter(|c| sel(**c)).map(|c| corner_offset(*c)).collect();
            pts.iter().sum::<Vector3<f64>>() / pts.len() as f64
        };
        match act.len() {
            2 => {
                let out = centroid(&|c| !inside[c]) - centroid(&|c| inside[c]);
                pair(fe[act[0]], fe[act[1]], out);
            }
            4 => {
                let centre = corners.iter().map(|c| v[*c]).sum::<f64>() / 4.0;
                let centre_inside = centre > iso;
                let mid = centroid(&|_| true);
                // Cut off the two corners that disagree with the centre.
                for m in 0..4 {
                    let c = corners[m];
                    if inside[c] != centre_inside {
                        let towards = corner_offset(c) - mid;
                        let out = if inside[c] { -towards } else { towards };
                        pair(fe[(m + 3) % 4], fe[m], out);
                    }
                }
            }
            _ => {}
        }
    }
    let mut seen = [false; 12];
    let mut loops = Vec::new();
    for start in 0..12 {
        if seen[start] || adj[start].is_empty() {
            continue;
        }
        let mut lp = vec![start];
        seen[start] = true;
        let (mut face, mut cur, out) = adj[start][0];
        let n = Vector3::from(FACE_NORMALS[face]);
        let forward = (edge_mid(cur) - edge_mid(start)).dot(&out.cross(&n)) > 0.0;
        while cur != start {
            seen[cur] = true;
            lp.push(cur);
            let next = adj[cur].iter().find(|(f, _, _)| *f != face).copied().expect("closed loop");
            face = next.0;
            cur = next.1;
        }
        if !forward {
            lp.reverse();
        }
        loops.push(lp);
    }
    loops
}

fn triangulate(ids: &[u32], vertices: &mut Vec<Vector3<f64>>) -> Vec<[u32; 3]> {
    match ids.len() {
        3 => vec![[ids[0], ids[1], ids[2]]],
        4 => {
            let p = |i: usize| vertices[ids[i] as usize];
            if (p(0) - p(2)).norm() <= (p(1) - p(3)).norm() {
                vec![[ids[0], ids[1], ids[2]], [ids[0], ids[2], ids[3]]]
            } else {
                vec![[ids[0], ids[1], ids[3]], [ids[1], ids[2], ids[3]]]
            }
        }
        n => {
            let c = ids.iter().map(|i| vertices[*i as usize]).sum::<Vector3<f64>>() / n as f64;
            vertices.push(c);
            let ci = (vertices.len() - 1) as u32;
            (0..n).map(|m| [ids[m], ids[(m + 1) % n], ci]).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_grid(n: usize, r: f64, smooth: bool) -> ScalarGrid {
        let h = 2.0 / (n - 1) as f64;
        ScalarGrid::from_fn([n; 3], Vector3::repeat(-1.0), h, |p| {
            let sd = r - p.norm();
            if smooth {
                1.0 / (1.0 + (-sd / 0.1).exp())
            } else if sd > 0.0 {
                1.0
            } else {
                0.0
            }
        })
    }

    fn edge_use(tris: &[[u32; 3]]) -> HashMap<(u32, u32), i32> {
        let mut m = HashMap::new();
        for t in tris {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *m.entry((a, b)).or_insert(0) += 1;
            }
        }
        m
    }

    #[test]
    fn binary_sphere_within_one_cell() {
        let g = sphere_grid(33, 0.6, false);
        let (v, t) = marching_cubes(&g, 0.5);
        assert!(!t.is_empty());
        for p in &v {
            assert!((p.norm() - 0.6).abs() <= g.spacing, "{}", p.norm());
        }
    }

    #[test]
    fn closed_and_consistently_oriented() {
        let g = sphere_grid(21, 0.55, true);
        let (v, t) = marching_cubes(&g, 0.5);
        let uses = edge_use(&t);
        // Every directed edge appears once and its reverse once.
        for ((a, b), n) in &uses {
            assert_eq!(*n, 1);
            assert_eq!(uses.get(&(*b, *a)), Some(&1), "open or flipped edge");
        }
        // Outward normals: positive signed volume.
        let vol: f64 = t
            .iter()
            .map(|tri| {
                let [a, b, c] = tri.map(|i| v[i as usize]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.55f64.powi(3);
        assert!((vol - exact).abs() < 0.05 * exact, "{vol} vs {exact}");
    }

    #[test]
    fn refinement_converges() {
        let rms = |n: usize| {
            let (v, _) = marching_cubes(&sphere_grid(n, 0.6, false), 0.5);
            (v.iter().map(|p| (p.norm() - 0.6).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let (coarse, fine) = (rms(17), rms(33));
        assert!(coarse / fine >= 1.5, "{coarse} -> {fine}");
    }

    #[test]
    fn ambiguous_faces_stay_closed() {
        // Checkerboard corners force four crossings on many faces.
        let g = ScalarGrid::from_fn([6, 6, 6], Vector3::zeros(), 1.0, |p| {
            let s = (p.x + p.y + p.z) as i64;
            if s % 2 == 0 {
                1.0 + 0.1 * p.x
            } else {
                0.0 - 0.05 * p.y
            }
        });
        let (v, t) = marching_cubes(&g, 0.5);
        assert!(!t.is_empty());
        let on_boundary = |i: u32| {
            let p = v[i as usize];
            (0..3).any(|d| p[d] < 1e-12 || p[d] > 5.0 - 1e-12)
        };
        let uses = edge_use(&t);
        for ((a, b), n) in &uses {
            assert_eq!(*n, 1);
            // Open edges can only lie on the grid boundary.
            assert!(uses.contains_key(&(*b, *a)) || (on_boundary(*a) && on_boundary(*b)));
        }
    }
}
