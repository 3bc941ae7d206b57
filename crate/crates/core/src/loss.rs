//! Training objectives built on the tape. Every loss is a mean over its
//! contributing elements and an empty set of elements yields zero.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffnet::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const VARIANCE_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_l: f64,
    pub lambda_o: f64,
    pub lambda_fs: f64,
    /// Truncation distance in metres.
    pub truncation: f64,
    /// Width of the occupancy target; `None` means `truncation / 3`.
    pub gaussian_sigma: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 3.0,
            lambda_s: 0.1,
            lambda_l: 10.0,
            lambda_o: 10.0,
            lambda_fs: 5.0,
            truncation: 0.10,
            gaussian_sigma: None,
        }
    }
}

impl LossWeights {
    pub fn sigma(&self) -> f64 {
        self.gaussian_sigma.unwrap_or(self.truncation / 3.0)
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_p, self.lambda_s, self.lambda_l, self.lambda_o, self.lambda_fs];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.truncation > 0.0) || !(self.sigma() > 0.0) {
            return Err(Error::Config("truncation and sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Which occupancy objective a ray sample feeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleRegion {
    /// Within the truncation band, with its occupancy target.
    Band(f64),
    /// In front of the band.
    Free,
    /// Behind the band or on a ray without depth.
    Ignored,
}

impl SampleRegion {
    pub fn classify(d: f64, gt: Option<f64>, weights: &LossWeights) -> Self {
        let Some(gt) = gt else {
            return SampleRegion::Ignored;
        };
        let tr = weights.truncation;
        if (d - gt).abs() <= tr {
            SampleRegion::Band(occupancy_target(d, gt, weights.sigma()))
        } else if d < gt - tr {
            SampleRegion::Free
        } else {
            SampleRegion::Ignored
        }
    }
}

/// Peak-normalized Gaussian centred on the observed depth.
pub fn occupancy_target(d: f64, gt: f64, sigma: f64) -> f64 {
    (-(d - gt) * (d - gt) / (2.0 * sigma * sigma)).exp()
}

/// Per-pixel supervision for a batch of rays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelTargets {
    pub color: Vec<[f64; 3]>,
    /// `None` marks a depth hole.
    pub depth: Vec<Option<f64>>,
    pub class_id: Vec<u16>,
}

impl PixelTargets {
    pub fn len(&self) -> usize {
        self.color.len()
    }

    pub fn is_empty(&self) -> bool {
        self.color.is_empty()
    }

}

fn valid_depth(gt: &[Option<f64>]) -> (Vec<usize>, Vec<f64>) {
    gt.iter().enumerate().filter_map(|(i, d)| d.map(|d| (i, d))).unzip()
}

fn warn_empty(name: &str) {
    log::warn!("{name} loss over an empty batch");
}

/// Mean absolute depth error over pixels with depth.
pub fn geometry_loss(tape: &mut Tape, depth: Var, gt: &[Option<f64>]) -> Var {
    let (idx, vals) = valid_depth(gt);
    if idx.is_empty() {
        warn_empty("geometry");
    }
    let d = tape.gather_rows(depth, &idx);
    let t = tape.constant(Tensor::column(&vals));
    let r = tape.sub(d, t);
    let a = tape.abs(r);
    tape.mean(a)
}

/// Mean over pixels of the squared color error norm.
pub fn photometric_loss(tape: &mut Tape, color: Var, gt: &[[f64; 3]]) -> Var {
    if gt.is_empty() {
        warn_empty("photometric");
        return tape.constant(Tensor::scalar(0.0));
    }
    let t = tape.constant(Tensor::from_vec(gt.len(), 3, gt.iter().flatten().copied().collect()).expect("shape"));
    let r = tape.sub(color, t);
    let sq = tape.square(r);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / gt.len() as f64)
}

/// Mean cross-entropy of the softmax of integrated logits. `class_order`
/// maps logit columns to class ids.
pub fn semantic_loss(tape: &mut Tape, logits: Var, gt: &[u16], class_order: &[u16]) -> Result<Var> {
    let targets = gt
        .iter()
        .map(|id| class_order.iter().position(|c| c == id).ok_or(Error::UnknownClass(*id)))
        .collect::<Result<Vec<_>>>()?;
    if targets.is_empty() {
        warn_empty("semantic");
    }
    let ce = tape.softmax_cross_entropy(logits, &targets);
    Ok(tape.mean(ce))
}

/// Mean Euclidean distance between fine and coarse latents. The fine side is
/// detached so only the coarse side receives gradient.
pub fn latent_loss(tape: &mut Tape, fine: Var, coarse: Var) -> Var {
    let f = tape.detach(fine);
    let r = tape.sub(f, coarse);
    let n = tape.row_l2_norm(r);
    tape.mean(n)
}

/// Splits samples (`R·M`, ray-major) into band and free-space sets.
pub fn partition_samples(depths: &[f64], gt: &[Option<f64>], weights: &LossWeights) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let m = if gt.is_empty() { 0 } else { depths.len() / gt.len() };
    let mut band = Vec::new();
    let mut targets = Vec::new();
    let mut free = Vec::new();
    for (i, d) in depths.iter().enumerate() {
        match SampleRegion::classify(*d, gt[i / m], weights) {
            SampleRegion::Band(t) => {
                band.push(i);
                targets.push(t);
            }
            SampleRegion::Free => free.push(i),
            SampleRegion::Ignored => {}
        }
    }
    (band, targets, free)
}

/// Mean squared error to the occupancy target over in-band samples.
pub fn occupancy_loss(tape: &mut Tape, occ: Var, depths: &[f64], gt: &[Option<f64>], weights: &LossWeights) -> Var {
    let (band, targets, _) = partition_samples(depths, gt, weights);
    let o = tape.gather_rows(occ, &band);
    let t = tape.constant(Tensor::column(&targets));
    let r = tape.sub(o, t);
    let sq = tape.square(r);
    tape.mean(sq)
}

/// Mean squared occupancy over samples in front of the truncation band.
pub fn freespace_loss(tape: &mut Tape, occ: Var, depths: &[f64], gt: &[Option<f64>], weights: &LossWeights) -> Var {
    let (_, _, free) = partition_samples(depths, gt, weights);
    let o = tape.gather_rows(occ, &free);
    let sq = tape.square(o);
    tape.mean(sq)
}

/// Depth error normalized by the rendered standard deviation.
pub fn tracking_geometry_loss(tape: &mut Tape, depth: Var, variance: Var, gt: &[Option<f64>]) -> Var {
    let (idx, vals) = valid_depth(gt);
    if idx.is_empty() {
        warn_empty("tracking geometry");
    }
    let d = tape.gather_rows(depth, &idx);
    let v = tape.gather_rows(variance, &idx);
    let t = tape.constant(Tensor::column(&vals));
    let r = tape.sub(d, t);
    let a = tape.abs(r);
    let v = tape.add_scalar(v, VARIANCE_EPS);
    let s = tape.sqrt(v);
    let q = tape.div(a, s);
    tape.mean(q)
}

/// Tape handles of the individual terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub geometry: Var,
    pub photometric: Var,
    pub semantic: Var,
    pub latent: Option<Var>,
    pub occupancy: Option<Var>,
    pub freespace: Option<Var>,
}

impl LossTerms {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item());
        LossBreakdown {
            total: tape.value(self.total).item(),
            geometry: tape.value(self.geometry).item(),
            photometric: tape.value(self.photometric).item(),
            semantic: tape.value(self.semantic).item(),
            latent: v(self.latent),
            occupancy: v(self.occupancy),
            freespace: v(self.freespace),
        }
    }
}

/// Numeric values of the loss terms (unweighted) and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub geometry: f64,
    pub photometric: f64,
    pub semantic: f64,
    pub latent: f64,
    pub occupancy: f64,
    pub freespace: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("total", self.total),
            ("geometry", self.geometry),
            ("photometric", self.photometric),
            ("semantic", self.semantic),
            ("latent", self.latent),
            ("occupancy", self.occupancy),
            ("freespace", self.freespace),
        ]
    }

    pub fn write_csv(&self, iteration: usize, out: &mut impl Write) -> std::io::Result<()> {
        for (term, value) in self.terms() {
            writeln!(out, "{iteration},{term},{value:e}")?;
        }
        Ok(())
    }
}

/// Rendered quantities the losses consume.
#[derive(Clone, Copy, Debug)]
pub struct Rendered<'a> {
    pub color: Var,
    pub depth: Var,
    pub logits: Var,
    pub variance: Var,
    pub occ: Var,
    /// Sample depths, ray-major.
    pub sample_depths: &'a [f64],
}

/// Weighted sum of the six mapping terms.
pub fn mapping_loss(
    tape: &mut Tape,
    r: &Rendered,
    latents: Option<(Var, Var)>,
    gt: &PixelTargets,
    class_order: &[u16],
    w: &LossWeights,
) -> Result<LossTerms> {
    let geometry = geometry_loss(tape, r.depth, &gt.depth);
    let photometric = photometric_loss(tape, r.color, &gt.color);
    let semantic = semantic_loss(tape, r.logits, &gt.class_id, class_order)?;
    let latent = latents.map(|(f, c)| latent_loss(tape, f, c));
    let occupancy = occupancy_loss(tape, r.occ, r.sample_depths, &gt.depth, w);
    let freespace = freespace_loss(tape, r.occ, r.sample_depths, &gt.depth, w);
    let mut total = geometry;
    for (term, lambda) in [
        (Some(photometric), w.lambda_p),
        (Some(semantic), w.lambda_s),
        (latent, w.lambda_l),
        (Some(occupancy), w.lambda_o),
        (Some(freespace), w.lambda_fs),
    ] {
        if let Some(t) = term {
            let s = tape.scale(t, lambda);
            total = tape.add(total, s);
        }
    }
    Ok(LossTerms {
        total,
        geometry,
        photometric,
        semantic,
        latent,
        occupancy: Some(occupancy),
        freespace: Some(freespace),
    })
}

/// Uncertainty-weighted geometry plus photometric and semantic terms.
pub fn tracking_loss(tape: &mut Tape, r: &Rendered, gt: &PixelTargets, class_order: &[u16], w: &LossWeights) -> Result<LossTerms> {
    let geometry = tracking_geometry_loss(tape, r.depth, r.variance, &gt.depth);
    let photometric = photometric_loss(tape, r.color, &gt.color);
    let semantic = semantic_loss(tape, r.logits, &gt.class_id, class_order)?;
    let p = tape.scale(photometric, w.lambda_p);
    let s = tape.scale(semantic, w.lambda_s);
    let total = tape.add(geometry, p);
    let total = tape.add(total, s);
    Ok(LossTerms {
        total,
        geometry,
        photometric,
        semantic,
        latent: None,
        occupancy: None,
        freespace: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::gradcheck::{check_leaves, CheckConfig};
    use crate::diffnet::{Gradients, ParamStore};

    fn eval(build: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let v = build(&mut tape);
        tape.value(v).item()
    }

    fn col(tape: &mut Tape, v: &[f64]) -> Var {
        tape.leaf(Tensor::column(v))
    }

    #[test]
    fn geometry_cases() {
        assert_eq!(eval(|t| { let d = col(t, &[1.0, 2.0]); geometry_loss(t, d, &[Some(1.0), Some(2.0)]) }), 0.0);
        assert_eq!(eval(|t| { let d = col(t, &[2.0, 1.0]); geometry_loss(t, d, &[Some(1.0), Some(2.0)]) }), 1.0);
        // Holes are skipped; all holes give zero.
        assert_eq!(eval(|t| { let d = col(t, &[2.0, 7.0]); geometry_loss(t, d, &[Some(1.0), None]) }), 1.0);
        assert_eq!(eval(|t| { let d = col(t, &[2.0]); geometry_loss(t, d, &[None]) }), 0.0);

        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let d = col(&mut tape, &[1.5, 0.5]);
        let l = geometry_loss(&mut tape, d, &[Some(1.0), Some(1.0)]);
        let g = tape.backward(l, &mut Gradients::new()).unwrap();
        assert_eq!(g.get(d).unwrap().data(), &[0.5, -0.5]);
    }

    #[test]
    fn photometric_cases() {
        let gt = [[0.2, 0.3, 0.4], [0.5, 0.6, 0.7]];
        assert_eq!(eval(|t| { let c = t.leaf(Tensor::from_vec(2, 3, vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7]).unwrap()); photometric_loss(t, c, &gt) }), 0.0);
        let v = eval(|t| {
            let c = t.leaf(Tensor::from_vec(2, 3, vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap());
            photometric_loss(t, c, &gt)
        });
        assert!((v - 0.03).abs() < 1e-12);
    }

    #[test]
    fn semantic_cases() {
        let order = [0u16, 3, 7];
        let v = eval(|t| { let l = t.leaf(Tensor::zeros(2, 3)); semantic_loss(t, l, &[3, 7], &order).unwrap() });
        assert!((v - 3f64.ln()).abs() < 1e-12);
        let v = eval(|t| { let l = t.leaf(Tensor::row(&[0.0, 60.0, 0.0])); semantic_loss(t, l, &[3], &order).unwrap() });
        assert!(v < 1e-20);
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let l = tape.leaf(Tensor::zeros(1, 3));
        assert!(matches!(semantic_loss(&mut tape, l, &[5], &order), Err(Error::UnknownClass(5))));
    }

    #[test]
    fn latent_cases() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let f = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 5.0]).unwrap());
        let l = latent_loss(&mut tape, f, c);
        assert_eq!(tape.value(l).item(), 0.5);
        let g = tape.backward(l, &mut Gradients::new()).unwrap();
        assert!(g.get(f).is_none_or(|t| t.data().iter().all(|v| *v == 0.0)));
        assert_eq!(g.get(c).unwrap().data(), &[0.0, 0.0, 0.0, 0.5]);
        assert_eq!(eval(|t| { let f = t.leaf(Tensor::zeros(3, 4)); let c = t.leaf(Tensor::zeros(3, 4)); latent_loss(t, f, c) }), 0.0);
    }

    #[test]
    fn occupancy_target_closed_forms() {
        let s = 0.1 / 3.0;
        assert_eq!(occupancy_target(2.0, 2.0, s), 1.0);
        assert!((occupancy_target(2.0 + s, 2.0, s) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((occupancy_target(2.0 - s, 2.0, s) - (-0.5f64).exp()).abs() < 1e-12);
        for delta in [0.01, 0.037, 0.1] {
            assert!((occupancy_target(1.0 + delta, 1.0, s) - occupancy_target(1.0 - delta, 1.0, s)).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_partition() {
        let w = LossWeights::default();
        assert_eq!(SampleRegion::classify(1.0, Some(1.0), &w), SampleRegion::Band(1.0));
        assert_eq!(SampleRegion::classify(0.5, Some(1.0), &w), SampleRegion::Free);
        assert_eq!(SampleRegion::classify(1.5, Some(1.0), &w), SampleRegion::Ignored);
        assert_eq!(SampleRegion::classify(0.5, None, &w), SampleRegion::Ignored);
        let depths = [0.5, 0.95, 1.0, 1.08, 1.3, 0.2, 0.5, 1.0, 2.0, 3.0];
        let gt = [Some(1.0), None];
        let (band, targets, free) = partition_samples(&depths, &gt, &w);
        assert_eq!(band, vec![1, 2, 3]);
        assert_eq!(free, vec![0]);
        assert_eq!(targets[1], 1.0);

        // One sample at gt with prediction 0 → 1; occupancy 1 at the free sample → 1/1.
        let v = eval(|t| { let o = col(t, &[0.0, 0.0, 0.0, 0.0]); occupancy_loss(t, o, &[1.0, 5.0, 6.0, 7.0], &[Some(1.0)], &w) });
        assert_eq!(v, 1.0);
        let v = eval(|t| { let o = col(t, &[1.0, 0.0, 0.0]); freespace_loss(t, o, &[0.1, 0.2, 1.0], &[Some(1.0)], &w) });
        assert_eq!(v, 0.5);
    }

    #[test]
    fn tracking_geometry_cases() {
        let gt = [Some(1.0), Some(2.0)];
        let with_var = |var: f64| eval(|t| { let d = col(t, &[1.5, 1.0]); let v = col(t, &[var, var]); tracking_geometry_loss(t, d, v, &gt) });
        let plain = eval(|t| { let d = col(t, &[1.5, 1.0]); geometry_loss(t, d, &gt) });
        assert!((with_var(1.0) - plain).abs() < 1e-9);
        assert!((with_var(4.0) - 0.5 * with_var(1.0)).abs() < 1e-9);
        assert!(with_var(0.0).is_finite());
    }

    fn rendered_fixture(t: &mut Tape) -> (Rendered<'static>, PixelTargets) {
        static DEPTHS: [f64; 6] = [0.5, 0.97, 1.04, 1.1, 2.0, 2.3];
        let color = t.leaf(Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let depth = col(t, &[1.1, 1.9]);
        let logits = t.leaf(Tensor::from_vec(2, 2, vec![0.3, -0.2, 0.1, 0.4]).unwrap());
        let variance = col(t, &[0.2, 0.3]);
        let occ = col(t, &[0.1, 0.6, 0.8, 0.3, 0.2, 0.7]);
        let gt = PixelTargets {
            color: vec![[0.25, 0.15, 0.2], [0.3, 0.55, 0.9]],
            depth: vec![Some(1.0), Some(2.05)],
            class_id: vec![1, 4],
        };
        (
            Rendered {
                color,
                depth,
                logits,
                variance,
                occ,
                sample_depths: &DEPTHS,
            },
            gt,
        )
    }

    #[test]
    fn mapping_and_tracking_sums() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let (r, gt) = rendered_fixture(&mut t);
        let w = LossWeights::default();
        let terms = mapping_loss(&mut t, &r, None, &gt, &[1, 4], &w).unwrap();
        let b = terms.breakdown(&t);
        let want = b.geometry + 3.0 * b.photometric + 0.1 * b.semantic + 10.0 * b.occupancy + 5.0 * b.freespace;
        assert!((b.total - want).abs() < 1e-12);
        let w2 = LossWeights { lambda_p: 6.0, ..w };
        let b2 = mapping_loss(&mut t, &r, None, &gt, &[1, 4], &w2).unwrap().breakdown(&t);
        assert!((b2.total - b.total - 3.0 * b.photometric).abs() < 1e-12);
        let tb = tracking_loss(&mut t, &r, &gt, &[1, 4], &w).unwrap().breakdown(&t);
        assert!((tb.total - (tb.geometry + 3.0 * tb.photometric + 0.1 * tb.semantic)).abs() < 1e-12);
        let mut csv = Vec::new();
        b.write_csv(7, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("7,total,"));

        // Only a geometry error of 1 → 1.
        let mut t = Tape::new(&store);
        let color = t.leaf(Tensor::from_vec(1, 3, vec![0.5; 3]).unwrap());
        let depth = col(&mut t, &[3.0]);
        let logits = t.leaf(Tensor::row(&[80.0, 0.0]));
        let variance = col(&mut t, &[1.0]);
        let occ = col(&mut t, &[0.0, 0.0]);
        let r = Rendered { color, depth, logits, variance, occ, sample_depths: &[5.0, 6.0] };
        let gt = PixelTargets { color: vec![[0.5; 3]], depth: vec![Some(2.0)], class_id: vec![0] };
        let b = mapping_loss(&mut t, &r, None, &gt, &[0, 1], &w).unwrap().breakdown(&t);
        assert!((b.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let store = ParamStore::new();
        let w = LossWeights::default();
        let mut t = Tape::new(&store);
        let (_, gt) = rendered_fixture(&mut t);
        let leaves: Vec<Tensor> = {
            let (r, _) = rendered_fixture(&mut t);
            [r.color, r.depth, r.logits, r.variance, r.occ].iter().map(|v| t.value(*v).clone()).collect()
        };
        let depths = [0.5, 0.97, 1.04, 1.1, 2.0, 2.3];
        let rep = check_leaves(&store, &leaves, &CheckConfig::default(), |t, v| {
            let r = Rendered { color: v[0], depth: v[1], logits: v[2], variance: v[3], occ: v[4], sample_depths: &depths };
            let m = mapping_loss(t, &r, None, &gt, &[1, 4], &w).unwrap();
            let k = tracking_loss(t, &r, &gt, &[1, 4], &w).unwrap();
            t.add(m.total, k.total)
        });
        assert!(rep.passed(), "{rep:?}");
    }
}
