//! Frozen two-layer convolutional image encoder and bilinear feature lookup.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Spatial feature map with channels interleaved per texel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Source pixels per feature texel.
    pub stride: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn texel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear lookup at continuous source-image pixel coordinates.
    /// Returns `None` when `uv` lies outside `[0, src_w − 1] × [0, src_h − 1]`.
    pub fn sample(&self, uv: [f64; 2], src_w: usize, src_h: usize) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        if self.sample_into(uv, src_w, src_h, &mut out, None) {
            Some(out)
        } else {
            None
        }
    }

    /// Writes the feature into `out` and, optionally, `d out / d uv` into
    /// `grad` laid out as `[channels][2]`. Returns visibility.
    pub(crate) fn sample_into(
        &self,
        uv: [f64; 2],
        src_w: usize,
        src_h: usize,
        out: &mut [f64],
        grad: Option<&mut [f64]>,
    ) -> bool {
        let [u, v] = uv;
        if !(u >= 0.0 && v >= 0.0 && u <= (src_w - 1) as f64 && v <= (src_h - 1) as f64) {
            return false;
        }
        let s = self.stride as f64;
        let (fx, live_x) = clamp_coord(u / s, self.width);
        let (fy, live_y) = clamp_coord(v / s, self.height);
        let x0 = (fx.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (fy.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let f00 = self.texel(x0, y0);
        let f10 = self.texel(x1, y0);
        let f01 = self.texel(x0, y1);
        let f11 = self.texel(x1, y1);
        for c in 0..self.channels {
            out[c] = (1.0 - tx) * (1.0 - ty) * f00[c]
                + tx * (1.0 - ty) * f10[c]
                + (1.0 - tx) * ty * f01[c]
                + tx * ty * f11[c];
        }
        if let Some(grad) = grad {
            for c in 0..self.channels {
                let dx = (1.0 - ty) * (f10[c] - f00[c]) + ty * (f11[c] - f01[c]);
                let dy = (1.0 - tx) * (f01[c] - f00[c]) + tx * (f11[c] - f10[c]);
                grad[2 * c] = if live_x { dx / s } else { 0.0 };
                grad[2 * c + 1] = if live_y { dy / s } else { 0.0 };
            }
        }
        true
    }
}

fn clamp_coord(x: f64, size: usize) -> (f64, bool) {
    let max = (size - 1) as f64;
    if x < 0.0 {
        (0.0, false)
    } else if x > max {
        (max, false)
    } else {
        (x, true)
    }
}

/// Seeded random convolutional encoder: 3×3 stride-2 conv + ReLU followed by
/// a 3×3 stride-1 conv, zero padding. Its weights are fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder {
    pub channels: usize,
    conv1: Conv3x3,
    conv2: Conv3x3,
}

#[derive(Clone, Debug, PartialEq)]
struct Conv3x3 {
    cin: usize,
    cout: usize,
    stride: usize,
    /// `[cout][cin][3][3]`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv3x3 {
    fn seeded(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (cin * 9) as f64).sqrt();
        let weights = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect();
        Self {
            cin,
            cout,
            stride,
            weights,
            bias,
        }
    }

    /// Input and output are `[h][w][c]`.
    fn apply(&self, input: &[f64], w: usize, h: usize, relu: bool) -> (Vec<f64>, usize, usize) {
        let ow = w.div_ceil(self.stride);
        let oh = h.div_ceil(self.stride);
        let mut out = vec![0.0; ow * oh * self.cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let cy = (oy * self.stride) as isize;
                let cx = (ox * self.stride) as isize;
                let o = &mut out[(oy * ow + ox) * self.cout..(oy * ow + ox + 1) * self.cout];
                o.copy_from_slice(&self.bias);
                for ky in 0..3isize {
                    let iy = cy + ky - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3isize {
                        let ix = cx + kx - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &input[(iy as usize * w + ix as usize) * self.cin..][..self.cin];
                        let tap = (ky * 3 + kx) as usize;
                        for (co, ov) in o.iter_mut().enumerate() {
                            let wrow = &self.weights[co * self.cin * 9..];
                            let mut acc = 0.0;
                            for ci in 0..self.cin {
                                acc += wrow[ci * 9 + tap] * px[ci];
                            }
                            *ov += acc;
                        }
                    }
                }
                if relu {
                    o.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
        }
        (out, ow, oh)
    }
}

impl ConvEncoder {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            channels,
            conv1: Conv3x3::seeded(3, channels, 2, &mut rng),
            conv2: Conv3x3::seeded(channels, channels, 1, &mut rng),
        }
    }

    /// Encodes an `[h][w][3]` image with values in `[0, 1]`.
    pub fn features(&self, rgb: &[f64], width: usize, height: usize) -> FeatureMap {
        debug_assert_eq!(rgb.len(), width * height * 3);
        let (a, w1, h1) = self.conv1.apply(rgb, width, height, true);
        let (b, w2, h2) = self.conv2.apply(&a, w1, h1, false);
        FeatureMap {
            width: w2,
            height: h2,
            channels: self.channels,
            stride: 2,
            data: b,
        }
    }

    /// Bit-level fingerprint of all weights.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self
            .conv1
            .weights
            .iter()
            .chain(&self.conv1.bias)
            .chain(&self.conv2.weights)
            .chain(&self.conv2.bias)
        {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
