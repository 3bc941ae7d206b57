//! One-blob positional encoding and the multiresolution hash feature grid.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static CLAMPED_INPUTS: AtomicU64 = AtomicU64::new(0);

/// Number of encoder inputs that fell outside `[0, 1]` and were clamped.
pub fn clamped_input_count() -> u64 {
    CLAMPED_INPUTS.load(Ordering::Relaxed)
}

pub(crate) fn note_clamped(n: u64) {
    if n > 0 {
        CLAMPED_INPUTS.fetch_add(n, Ordering::Relaxed);
    }
}

/// Axis-aligned box that world points are normalized into before encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|i| !(max[i] > min[i])) {
            return Err(Error::Config(format!("degenerate scene bounds {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    /// Maps a world point into `[0, 1]³` without clamping.
    pub fn normalize(&self, p: &Vector3<f64>) -> [f64; 3] {
        let e = self.extent();
        [
            (p.x - self.min[0]) / e[0],
            (p.y - self.min[1]) / e[1],
            (p.z - self.min[2]) / e[2],
        ]
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneBlobConfig {
    pub bins_per_dim: usize,
    /// Kernel standard deviation as a fraction of the unit domain.
    pub kernel_sigma: f64,
}

impl Default for OneBlobConfig {
    fn default() -> Self {
        Self::with_bins(16)
    }
}

impl OneBlobConfig {
    pub fn with_bins(bins: usize) -> Self {
        Self {
            bins_per_dim: bins,
            kernel_sigma: 1.0 / bins as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins_per_dim < 2 || !(self.kernel_sigma > 0.0) {
            return Err(Error::Config(format!("invalid one-blob config {self:?}")));
        }
        Ok(())
    }

    pub fn output_len(&self) -> usize {
        3 * self.bins_per_dim
    }

    /// Encodes one scalar in `[0, 1]` into `out` (length `bins_per_dim`).
    /// When `deriv` is given it receives `d out / d x`.
    pub(crate) fn encode_scalar(&self, x: f64, out: &mut [f64], deriv: Option<&mut [f64]>) {
        let bins = self.bins_per_dim;
        let inv_var = 1.0 / (self.kernel_sigma * self.kernel_sigma);
        let mut total = 0.0;
        for (b, o) in out.iter_mut().enumerate().take(bins) {
            let c = (b as f64 + 0.5) / bins as f64;
            let d = x - c;
            *o = (-0.5 * d * d * inv_var).exp();
            total += *o;
        }
        for o in out.iter_mut().take(bins) {
            *o /= total;
        }
        if let Some(deriv) = deriv {
            // d out_b / dx = out_b (Σ_j out_j a_j − a_b), a_b = (x − c_b)/σ².
            let mut mean_a = 0.0;
            for (b, o) in out.iter().enumerate().take(bins) {
                let c = (b as f64 + 0.5) / bins as f64;
                mean_a += o * (x - c) * inv_var;
            }
            for b in 0..bins {
                let c = (b as f64 + 0.5) / bins as f64;
                deriv[b] = out[b] * (mean_a - (x - c) * inv_var);
            }
        }
    }
}

/// One-blob encoding of a normalized point. Returns the encoding and whether
/// any component had to be clamped into `[0, 1]`.
pub fn oneblob_encode(x: [f64; 3], cfg: &OneBlobConfig) -> (Vec<f64>, bool) {
    let bins = cfg.bins_per_dim;
    let mut out = vec![0.0; 3 * bins];
    let mut clamped = false;
    for d in 0..3 {
        let mut v = x[d];
        if !(0.0..=1.0).contains(&v) {
            clamped = true;
            v = v.clamp(0.0, 1.0);
        }
        cfg.encode_scalar(v, &mut out[d * bins..(d + 1) * bins], None);
    }
    if clamped {
        note_clamped(1);
    }
    (out, clamped)
}

pub const HASH_PRIMES: [u64; 3] = [73_856_093, 19_349_663, 83_492_791];

/// Table index of an integer vertex. `level_resolution` is the number of
/// vertices per axis. Levels whose vertex count fits in the table are indexed
/// densely; otherwise coordinates are hashed with XOR of prime products.
pub fn hash_index(level_resolution: usize, cell: [u64; 3], table_size: usize) -> usize {
    debug_assert!(table_size.is_power_of_two());
    let res = level_resolution as u64;
    if res.saturating_mul(res).saturating_mul(res) <= table_size as u64 {
        (cell[0] + cell[1] * res + cell[2] * res * res) as usize
    } else {
        let h = cell[0].wrapping_mul(HASH_PRIMES[0])
            ^ cell[1].wrapping_mul(HASH_PRIMES[1])
            ^ cell[2].wrapping_mul(HASH_PRIMES[2]);
        (h & (table_size as u64 - 1)) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub features_per_level: usize,
    pub log2_table_size: u32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            base_resolution: 16,
            max_resolution: 256,
            features_per_level: 2,
            log2_table_size: 15,
        }
    }
}

impl HashGridConfig {
    /// Picks `max_resolution` so the finest voxel edge is at most `voxel`
    /// metres along the longest axis of `bounds`.
    pub fn with_finest_voxel(mut self, bounds: &SceneBounds, voxel: f64) -> Self {
        let longest = bounds.extent().iter().cloned().fold(0.0, f64::max);
        self.max_resolution = ((longest / voxel).ceil() as usize).max(self.base_resolution);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0
            || self.base_resolution < 1
            || self.max_resolution < self.base_resolution
            || self.features_per_level == 0
            || self.log2_table_size == 0
            || self.log2_table_size > 30
        {
            return Err(Error::Config(format!("invalid hash grid config {self:?}")));
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    pub fn output_len(&self) -> usize {
        self.levels * self.features_per_level
    }
}

/// Resolved per-level geometry of a hash grid. The trainable table itself is
/// a `[levels · table_size, features_per_level]` parameter tensor held by
/// the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    pub config: HashGridConfig,
    /// Cells per axis at each level.
    pub resolutions: Vec<usize>,
}

/// One trilinear corner contribution: table row, weight and the gradient of
/// the weight with respect to the normalized input.
#[derive(Clone, Copy, Debug, Default)]
pub struct Corner {
    pub row: usize,
    pub weight: f64,
    pub dweight: [f64; 3],
}

impl HashGrid {
    pub fn new(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let l = config.levels;
        let growth = if l > 1 {
            ((config.max_resolution as f64).ln() - (config.base_resolution as f64).ln()) / (l - 1) as f64
        } else {
            0.0
        };
        let resolutions = (0..l)
            .map(|i| {
                let r = (config.base_resolution as f64 * (growth * i as f64).exp() + 1e-9).floor() as usize;
                r.clamp(config.base_resolution, config.max_resolution)
            })
            .collect();
        Ok(Self { config, resolutions })
    }

    pub fn output_len(&self) -> usize {
        self.config.output_len()
    }

    pub fn table_rows(&self) -> usize {
        self.config.levels * self.config.table_size()
    }

    /// Whether `level` is indexed without hashing.
    pub fn is_dense(&self, level: usize) -> bool {
        let v = (self.resolutions[level] + 1) as u64;
        v * v * v <= self.config.table_size() as u64
    }

    /// The eight corners surrounding a normalized point at one level.
    /// Inputs are clamped to `[0, 1]`; clamped axes carry zero weight gradient.
    pub fn corners(&self, level: usize, x: [f64; 3]) -> [Corner; 8] {
        let n = self.resolutions[level];
        let t = self.config.table_size();
        let mut cell = [0u64; 3];
        let mut frac = [0.0; 3];
        let mut live = [true; 3];
        for d in 0..3 {
            let mut v = x[d];
            if !(0.0..=1.0).contains(&v) {
                live[d] = false;
                v = v.clamp(0.0, 1.0);
            }
            let p = v * n as f64;
            let c = (p.floor() as usize).min(n - 1);
            cell[d] = c as u64;
            frac[d] = p - c as f64;
        }
        let mut out = [Corner::default(); 8];
        for (ci, corner) in out.iter_mut().enumerate() {
            let bits = [ci & 1, (ci >> 1) & 1, (ci >> 2) & 1];
            let mut w = [0.0; 3];
            let mut dw = [0.0; 3];
            for d in 0..3 {
                if bits[d] == 1 {
                    w[d] = frac[d];
                    dw[d] = 1.0;
                } else {
                    w[d] = 1.0 - frac[d];
                    dw[d] = -1.0;
                }
            }
            let v = [
                cell[0] + bits[0] as u64,
                cell[1] + bits[1] as u64,
                cell[2] + bits[2] as u64,
            ];
            corner.row = level * t + hash_index(n + 1, v, t);
            corner.weight = w[0] * w[1] * w[2];
            let scale = n as f64;
            corner.dweight = [
                if live[0] { dw[0] * w[1] * w[2] * scale } else { 0.0 },
                if live[1] { w[0] * dw[1] * w[2] * scale } else { 0.0 },
                if live[2] { w[0] * w[1] * dw[2] * scale } else { 0.0 },
            ];
        }
        out
    }

    /// Feature lookup against a flat row-major table of
    /// `table_rows() × features_per_level` values.
    pub fn query(&self, table: &[f64], x: [f64; 3]) -> Result<Vec<f64>> {
        let f = self.config.features_per_level;
        let mut out = vec![0.0; self.output_len()];
        for level in 0..self.config.levels {
            for c in self.corners(level, x) {
                let row = &table[c.row * f..(c.row + 1) * f];
                for k in 0..f {
                    if row[k].is_nan() {
                        return Err(Error::NonFinite(format!("hash table row {}", c.row)));
                    }
                    out[level * f + k] += c.weight * row[k];
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn small_grid() -> HashGrid {
        HashGrid::new(HashGridConfig {
            levels: 4,
            base_resolution: 4,
            max_resolution: 32,
            features_per_level: 2,
            log2_table_size: 10,
        })
        .unwrap()
    }

    fn random_table(grid: &HashGrid, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..grid.table_rows() * grid.config.features_per_level)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    }

    #[test]
    fn oneblob_symmetric_peak_at_centre() {
        let cfg = OneBlobConfig::with_bins(16);
        let (e, clamped) = oneblob_encode([0.5, 0.5, 0.5], &cfg);
        assert!(!clamped);
        let x = &e[..16];
        let argmax = (0..16).max_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap()).unwrap();
        assert!(argmax == 7 || argmax == 8);
        for b in 0..8 {
            assert!((x[b] - x[15 - b]).abs() < 1e-12);
        }
        assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oneblob_translation_equivariance_and_continuity() {
        let cfg = OneBlobConfig::with_bins(16);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let v = rng.random_range(0.3..0.6);
            let (a, _) = oneblob_encode([v, v, v], &cfg);
            let (b, _) = oneblob_encode([v + 1.0 / 16.0, v, v], &cfg);
            for bin in 2..14 {
                assert!((a[bin] - b[bin + 1]).abs() < 1e-6);
            }
            let (c, _) = oneblob_encode([v + 1e-9, v, v], &cfg);
            for (p, q) in a.iter().zip(&c) {
                assert!((p - q).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn oneblob_clamps_and_counts() {
        let before = clamped_input_count();
        let (e, clamped) = oneblob_encode([1.5, 0.2, -0.1], &OneBlobConfig::default());
        assert!(clamped);
        assert!(clamped_input_count() > before);
        let (f, _) = oneblob_encode([1.0, 0.2, 0.0], &OneBlobConfig::default());
        assert_eq!(e, f);
    }

    #[test]
    fn oneblob_derivative_matches_finite_differences() {
        let cfg = OneBlobConfig::with_bins(16);
        let mut out = vec![0.0; 16];
        let mut deriv = vec![0.0; 16];
        let mut plus = vec![0.0; 16];
        let mut minus = vec![0.0; 16];
        for &x in &[0.11, 0.5, 0.77, 0.93] {
            cfg.encode_scalar(x, &mut out, Some(&mut deriv));
            cfg.encode_scalar(x + 1e-6, &mut plus, None);
            cfg.encode_scalar(x - 1e-6, &mut minus, None);
            for b in 0..16 {
                let fd = (plus[b] - minus[b]) / 2e-6;
                assert!((fd - deriv[b]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn resolutions_grow_geometrically() {
        let g = HashGrid::new(HashGridConfig::default()).unwrap();
        assert_eq!(g.resolutions[0], 16);
        assert_eq!(*g.resolutions.last().unwrap(), 256);
        assert!(g.resolutions.windows(2).all(|w| w[1] >= w[0]));
        let bounds = SceneBounds::new([-1.6; 3], [1.6; 3]).unwrap();
        let cfg = HashGridConfig::default().with_finest_voxel(&bounds, 0.02);
        assert_eq!(cfg.max_resolution, 160);
    }

    #[test]
    fn dense_index_and_determinism() {
        assert_eq!(hash_index(5, [1, 2, 3], 1024), 1 + 2 * 5 + 3 * 25);
        let a = hash_index(200, [17, 99, 3], 1 << 15);
        assert_eq!(a, hash_index(200, [17, 99, 3], 1 << 15));
        assert!(a < 1 << 15);
    }

    #[test]
    fn collision_rate_matches_random_hash_prediction() {
        let table = 1usize << 12;
        let res = 24usize; // 24³ = 13824 vertices > table
        let mut seen = HashSet::new();
        let mut cells = 0usize;
        for k in 0..res as u64 {
            for j in 0..res as u64 {
                for i in 0..res as u64 {
                    seen.insert(hash_index(res, [i, j, k], table));
                    cells += 1;
                }
            }
        }
        let measured = 1.0 - seen.len() as f64 / cells as f64;
        let t = table as f64;
        let n = cells as f64;
        let expected = 1.0 - t * (1.0 - (1.0 - 1.0 / t).powf(n)) / n;
        assert!((measured - expected).abs() < 0.2 * expected, "{measured} vs {expected}");
    }

    #[test]
    fn query_at_corner_and_cell_centre() {
        let g = small_grid();
        let table = random_table(&g, 1);
        let f = g.config.features_per_level;
        // Vertex (1,2,3) of level 0 (resolution 4).
        let x = [1.0 / 4.0, 2.0 / 4.0, 3.0 / 4.0];
        let out = g.query(&table, x).unwrap();
        let row = hash_index(5, [1, 2, 3], g.config.table_size());
        assert_eq!(&out[..f], &table[row * f..(row + 1) * f]);

        let centre = [1.5 / 4.0, 2.5 / 4.0, 0.5 / 4.0];
        let out = g.query(&table, centre).unwrap();
        let mut mean = [0.0; 2];
        for ci in 0..8u64 {
            let v = [1 + (ci & 1), 2 + ((ci >> 1) & 1), (ci >> 2) & 1];
            let r = hash_index(5, v, g.config.table_size());
            for k in 0..2 {
                mean[k] += table[r * f + k] / 8.0;
            }
        }
        assert!((out[0] - mean[0]).abs() < 1e-12 && (out[1] - mean[1]).abs() < 1e-12);
    }

    #[test]
    fn query_is_continuous_across_faces() {
        let g = small_grid();
        let table = random_table(&g, 2);
        let face = 0.25; // a cell boundary at every level of this grid
        let a = g.query(&table, [face - 1e-10, 0.4, 0.6]).unwrap();
        let b = g.query(&table, [face + 1e-10, 0.4, 0.6]).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn query_rejects_nan() {
        let g = small_grid();
        let table = vec![f64::NAN; g.table_rows() * 2];
        assert!(matches!(g.query(&table, [0.1, 0.2, 0.3]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn table_gradient_is_trilinear_weight() {
        let g = small_grid();
        let mut table = random_table(&g, 3);
        let x = [0.37, 0.61, 0.18];
        let f = g.config.features_per_level;
        for c in g.corners(2, x) {
            let idx = c.row * f;
            let orig = table[idx];
            let h = 1e-5;
            table[idx] = orig + h;
            let fp: f64 = g.query(&table, x).unwrap().iter().sum();
            table[idx] = orig - h;
            let fm: f64 = g.query(&table, x).unwrap().iter().sum();
            table[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            // Several corners may share a hashed row; sum their weights.
            let expected: f64 = g
                .corners(2, x)
                .iter()
                .filter(|o| o.row == c.row)
                .map(|o| o.weight)
                .sum();
            assert!((fd - expected).abs() <= 1e-5 * expected.abs().max(1e-3));
        }
    }
}
