use nalgebra::Vector3;

/// Static 3-d tree for nearest-point queries. Splits at the median, so
/// repeated coordinates are fine.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    // Implicit balanced tree over `points`, reordered in place.
    axes: Vec<u8>,
}

const LEAF: usize = 8;

impl KdTree {
    pub fn new(mut points: Vec<Vector3<f64>>) -> Self {
        let mut axes = vec![0u8; points.len()];
        build(&mut points, &mut axes);
        Self { points, axes }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distance to the nearest stored point, infinite when empty.
    pub fn nearest_distance(&self, q: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.points.len(), q, &mut best);
        best.sqrt()
    }

    fn search(&self, lo: usize, hi: usize, q: &Vector3<f64>, best: &mut f64) {
        if hi - lo <= LEAF {
            for p in &self.points[lo..hi] {
                *best = best.min((p - q).norm_squared());
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = self.axes[mid] as usize;
        let p = &self.points[mid];
        *best = best.min((p - q).norm_squared());
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(near.0, near.1, q, best);
        if diff * diff < *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn build(points: &mut [Vector3<f64>], axes: &mut [u8]) {
    if points.len() <= LEAF {
        return;
    }
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for p in points.iter() {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let axis = (hi - lo).imax();
    let mid = points.len() / 2;
    points.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    axes[mid] = axis as u8;
    let (left, rest) = points.split_at_mut(mid);
    let (al, ar) = axes.split_at_mut(mid);
    build(left, al);
    build(&mut rest[1..], &mut ar[1..]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts: Vec<Vector3<f64>> = (0..2000)
            .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        // A plate of repeated coordinates.
        pts.extend((0..500).map(|_| Vector3::new(rng.random(), rng.random(), 0.5)));
        let tree = KdTree::new(pts.clone());
        for _ in 0..300 {
            let q = Vector3::new(rng.random_range(-0.5..1.5), rng.random(), rng.random());
            let brute = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert_eq!(tree.nearest_distance(&q), brute);
        }
        assert!(KdTree::new(Vec::new()).nearest_distance(&Vector3::zeros()).is_infinite());
    }
}
