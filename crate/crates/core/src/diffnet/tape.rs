//! Reverse-mode tape over row-major 2-D tensors.
//!
//! Ops read parameters straight from a [`ParamStore`]; parameter gradients
//! are accumulated into a caller-owned [`Gradients`] so that calling
//! [`Tape::backward`] twice without zeroing doubles them. Shape mismatches
//! between ops are programming errors and panic.

use std::collections::HashSet;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::Vector3;

use super::conv::FeatureMap;
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::encoding::{note_clamped, HashGrid, OneBlobConfig, SceneBounds};
use crate::error::{Error, Result};
use crate::geometry::{delta_point_jacobian, Intrinsics, Pose, PoseDelta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which store parameters receive gradients.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    Nothing,
    Only(HashSet<ParamId>),
}

impl Trainable {
    fn contains(&self, id: ParamId) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Only(set) => set.contains(&id),
        }
    }
}

/// A reference camera used for image-feature pooling. Its pose is treated
/// as a constant.
#[derive(Clone, Debug)]
pub struct RefView {
    pub world_to_cam: Pose,
    pub origin: Vector3<f64>,
    pub intrinsics: Intrinsics,
    pub features: Arc<FeatureMap>,
}

impl RefView {
    pub fn new(cam_to_world: &Pose, intrinsics: Intrinsics, features: Arc<FeatureMap>) -> Self {
        Self {
            world_to_cam: cam_to_world.inverse(),
            origin: cam_to_world.translation,
            intrinsics,
            features,
        }
    }
}

/// Rows `rows` of a ref-gather input all pool over the same views.
#[derive(Clone, Debug)]
pub struct RefGroup {
    pub rows: Range<usize>,
    pub views: Vec<usize>,
}

struct RefGatherData {
    views: Vec<RefView>,
    cfg: OneBlobConfig,
    /// (point row, view index) per output row.
    pairs: Vec<(u32, u32)>,
}

enum Op {
    Leaf,
    Constant,
    Param(ParamId),
    Linear { x: Var, w: ParamId, b: ParamId },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Sum(Var),
    Mean(Var),
    RowL2Norm(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    SoftmaxCe { logits: Var, targets: Vec<usize> },
    TerminationWeights(Var),
    Integrate { w: Var, v: Var },
    DepthVariance { w: Var, d: Var },
    OneBlob { x: Var, bounds: SceneBounds, deriv: Vec<f64> },
    HashEncode { x: Var, table: ParamId, grid: Arc<HashGrid>, bounds: SceneBounds },
    RigidTransform { delta: Var, points: Vec<f64>, frame: Vec<usize> },
    RefGather { x: Var, data: Box<RefGatherData> },
    SegmentMean { x: Var, seg: Arc<Vec<u32>>, counts: Vec<u32> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowL2Norm(_) => "row_l2_norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::TerminationWeights(_) => "termination_weights",
            Op::Integrate { .. } => "integrate",
            Op::DepthVariance { .. } => "depth_variance",
            Op::OneBlob { .. } => "oneblob",
            Op::HashEncode { .. } => "hash_encode",
            Op::RigidTransform { .. } => "rigid_transform",
            Op::RefGather { .. } => "ref_gather",
            Op::SegmentMean { .. } => "segment_mean",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of the tape's leaves after a backward pass.
#[derive(Debug, Default)]
pub struct LeafGrads {
    grads: Vec<(Var, Tensor)>,
}

impl LeafGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.iter().find(|(k, _)| *k == v).map(|(_, t)| t)
    }
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    trainable: Trainable,
    nodes: Vec<Node>,
    check_finite: bool,
    nonfinite: Option<&'static str>,
}

impl<'s> Tape<'s> {
    /// Tape on which every parameter is trainable.
    pub fn new(store: &'s ParamStore) -> Self {
        Self::with_trainable(store, Trainable::All)
    }

    /// Tape on which no parameter receives gradients.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::with_trainable(store, Trainable::Nothing)
    }

    pub fn with_trainable(store: &'s ParamStore, trainable: Trainable) -> Self {
        Self {
            store,
            trainable,
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            nonfinite: None,
        }
    }

    /// Enables the per-op finite check regardless of build mode.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.check_finite && self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).clone();
        let ng = self.trainable.contains(id);
        self.push(value, Op::Param(id), ng)
    }

    /// `x · W + b` with `W` of shape `in × out` and `b` of shape `1 × out`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let wt = self.store.get(w);
        let bt = self.store.get(b);
        let xv = &self.nodes[x.0].value;
        let (n, k, m) = (xv.rows(), xv.cols(), wt.cols());
        assert_eq!(wt.rows(), k, "linear: input width {k} vs weight rows {}", wt.rows());
        assert_eq!(bt.shape(), [1, m], "linear: bias shape");
        let mut out = Tensor::zeros(n, m);
        for r in 0..n {
            out.row_slice_mut(r).copy_from_slice(bt.data());
        }
        gemm(n, k, m, 1.0, xv.data(), k, 1, wt.data(), m, 1, 1.0, out.data_mut(), m);
        let ng = self.needs(x) || self.trainable.contains(w) || self.trainable.contains(b);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(out, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "{}: shape mismatch", op.name());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).expect("same shape");
        let ng = self.needs(a) || self.needs(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean over all entries; zero for an empty tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let m = if xv.is_empty() { 0.0 } else { xv.sum() / xv.len() as f64 };
        let ng = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Euclidean norm of each row, `n × 1`.
    pub fn row_l2_norm(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = (0..xv.rows())
            .map(|r| xv.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::from_vec(xv.rows(), 1, data).expect("shape");
        let ng = self.needs(x);
        self.push(out, Op::RowL2Norm(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.rows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows(), rows, "concat_cols: row mismatch");
            let c = pv.cols();
            for r in 0..rows {
                out.row_slice_mut(r)[off..off + c].copy_from_slice(pv.row_slice(r));
            }
            off += c;
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.cols(), cols, "concat_rows: column mismatch");
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::from_vec(rows, cols, data).expect("shape");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_slice_mut(r).copy_from_slice(&xv.row_slice(r)[start..start + len]);
        }
        let ng = self.needs(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let c = xv.cols();
        let out = Tensor::from_vec(len, c, xv.data()[start * c..(start + len) * c].to_vec()).expect("shape");
        let ng = self.needs(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(xv.row_slice(i));
        }
        let out = Tensor::from_vec(idx.len(), c, data).expect("shape");
        let ng = self.needs(x);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.nodes[x.0]
            .value
            .clone()
            .reshaped(rows, cols)
            .expect("reshape size mismatch");
        let ng = self.needs(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    /// Per-row `−log softmax(logits)[target]`, shape `n × 1`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.rows(), targets.len(), "softmax_cross_entropy: target count");
        let data = (0..lv.rows())
            .map(|r| {
                let row = lv.row_slice(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[targets[r]]
            })
            .collect();
        let out = Tensor::from_vec(lv.rows(), 1, data).expect("shape");
        let ng = self.needs(logits);
        self.push(
            out,
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Ray termination weights `w_i = o_i Π_{j<i} (1 − o_j)` for each row of
    /// an `rays × samples` occupancy matrix.
    pub fn termination_weights(&mut self, occ: Var) -> Var {
        let ov = &self.nodes[occ.0].value;
        let mut out = Tensor::zeros(ov.rows(), ov.cols());
        for r in 0..ov.rows() {
            let mut t = 1.0;
            let o = ov.row_slice(r);
            let w = out.row_slice_mut(r);
            for i in 0..o.len() {
                w[i] = o[i] * t;
                t *= 1.0 - o[i];
            }
        }
        let ng = self.needs(occ);
        self.push(out, Op::TerminationWeights(occ), ng)
    }

    /// `out[r] = Σ_i w[r, i] · v[r·M + i]` for weights `R × M` and per-sample
    /// values `R·M × C`.
    pub fn integrate(&mut self, w: Var, v: Var) -> Var {
        let wv = &self.nodes[w.0].value;
        let vv = &self.nodes[v.0].value;
        let (r, m, c) = (wv.rows(), wv.cols(), vv.cols());
        assert_eq!(vv.rows(), r * m, "integrate: value rows");
        let mut out = Tensor::zeros(r, c);
        for ray in 0..r {
            let wr = wv.row_slice(ray);
            let o = out.row_slice_mut(ray);
            for (i, &wi) in wr.iter().enumerate() {
                let vr = vv.row_slice(ray * m + i);
                for k in 0..c {
                    o[k] += wi * vr[k];
                }
            }
        }
        let ng = self.needs(w) || self.needs(v);
        self.push(out, Op::Integrate { w, v }, ng)
    }

    /// `Σ_i w_i (d̂ − d_i)²` with `d̂ = Σ_i w_i d_i`; weights `R × M`, depths
    /// `R·M × 1`.
    pub fn depth_variance(&mut self, w: Var, d: Var) -> Var {
        let wv = &self.nodes[w.0].value;
        let dv = &self.nodes[d.0].value;
        let (r, m) = (wv.rows(), wv.cols());
        assert_eq!(dv.shape(), [r * m, 1], "depth_variance: depth shape");
        let data = (0..r)
            .map(|ray| {
                let wr = wv.row_slice(ray);
                let dr = &dv.data()[ray * m..(ray + 1) * m];
                let dh: f64 = wr.iter().zip(dr).map(|(a, b)| a * b).sum();
                wr.iter().zip(dr).map(|(a, b)| a * (dh - b) * (dh - b)).sum()
            })
            .collect();
        let out = Tensor::from_vec(r, 1, data).expect("shape");
        let ng = self.needs(w) || self.needs(d);
        self.push(out, Op::DepthVariance { w, d }, ng)
    }

    /// One-blob encoding of world points (`n × 3`) normalized into `bounds`.
    /// Out-of-bounds coordinates are clamped and counted.
    pub fn oneblob(&mut self, x: Var, bounds: &SceneBounds, cfg: &OneBlobConfig) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.cols(), 3, "oneblob expects points");
        let bins = cfg.bins_per_dim;
        let width = 3 * bins;
        let n = xv.rows();
        let ng = self.needs(x);
        let mut out = Tensor::zeros(n, width);
        let mut deriv = if ng { vec![0.0; n * width] } else { Vec::new() };
        let mut clamped = 0;
        for r in 0..n {
            let p = xv.row_slice(r);
            let u = bounds.normalize(&Vector3::new(p[0], p[1], p[2]));
            for d in 0..3 {
                let live = (0.0..=1.0).contains(&u[d]);
                if !live {
                    clamped += 1;
                }
                let o = &mut out.row_slice_mut(r)[d * bins..(d + 1) * bins];
                if ng && live {
                    let dd = &mut deriv[r * width + d * bins..r * width + (d + 1) * bins];
                    cfg.encode_scalar(u[d], o, Some(dd));
                } else {
                    cfg.encode_scalar(u[d].clamp(0.0, 1.0), o, None);
                }
            }
        }
        note_clamped(clamped);
        self.push(
            out,
            Op::OneBlob {
                x,
                bounds: *bounds,
                deriv,
            },
            ng,
        )
    }

    /// Multiresolution hash features of world points (`n × 3`).
    pub fn hash_encode(&mut self, x: Var, table: ParamId, grid: &Arc<HashGrid>, bounds: &SceneBounds) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.cols(), 3, "hash_encode expects points");
        let tv = self.store.get(table);
        let f = grid.config.features_per_level;
        assert_eq!(tv.shape(), [grid.table_rows(), f], "hash table shape");
        let n = xv.rows();
        let width = grid.output_len();
        let mut out = Tensor::zeros(n, width);
        let mut clamped = 0;
        for r in 0..n {
            let p = xv.row_slice(r);
            let u = bounds.normalize(&Vector3::new(p[0], p[1], p[2]));
            clamped += u.iter().filter(|v| !(0.0..=1.0).contains(*v)).count() as u64;
            let o = out.row_slice_mut(r);
            for level in 0..grid.config.levels {
                for c in grid.corners(level, u) {
                    let row = &tv.data()[c.row * f..(c.row + 1) * f];
                    for k in 0..f {
                        o[level * f + k] += c.weight * row[k];
                    }
                }
            }
        }
        note_clamped(clamped);
        let ng = self.needs(x) || self.trainable.contains(table);
        self.push(
            out,
            Op::HashEncode {
                x,
                table,
                grid: grid.clone(),
                bounds: *bounds,
            },
            ng,
        )
    }

    /// `Exp(ω_f) q + v_f` for each constant point `q` (`n × 3`), where `f` is
    /// the row's frame and `delta` holds one twist per frame (`frames × 6`).
    pub fn rigid_transform(&mut self, delta: Var, points: &Tensor, frame: &[usize]) -> Var {
        let dv = &self.nodes[delta.0].value;
        assert_eq!(dv.cols(), 6, "rigid_transform: delta width");
        assert_eq!(points.cols(), 3, "rigid_transform: points width");
        assert_eq!(points.rows(), frame.len(), "rigid_transform: frame map length");
        let exps: Vec<Pose> = (0..dv.rows())
            .map(|f| PoseDelta::from_slice(dv.row_slice(f)).exp())
            .collect();
        let mut out = Tensor::zeros(points.rows(), 3);
        for r in 0..points.rows() {
            let q = points.row_slice(r);
            let p = exps[frame[r]].transform_point(&Vector3::new(q[0], q[1], q[2]));
            out.row_slice_mut(r).copy_from_slice(p.as_slice());
        }
        let ng = self.needs(delta);
        self.push(
            out,
            Op::RigidTransform {
                delta,
                points: points.data().to_vec(),
                frame: frame.to_vec(),
            },
            ng,
        )
    }

    /// Builds one row per (point, visible reference view) holding
    /// `[oneblob(view origin), oneblob(unit direction), image feature]`.
    /// Returns the rows and the point index of each row, for
    /// [`Tape::segment_mean`].
    pub fn ref_gather(
        &mut self,
        x: Var,
        views: &[RefView],
        groups: &[RefGroup],
        bounds: &SceneBounds,
        cfg: &OneBlobConfig,
    ) -> (Var, Arc<Vec<u32>>) {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.cols(), 3, "ref_gather expects points");
        let bins = cfg.bins_per_dim;
        let fdim = views.first().map(|v| v.features.channels).unwrap_or(0);
        let width = 6 * bins + fdim;
        let origin_enc: Vec<Vec<f64>> = views
            .iter()
            .map(|v| {
                let u = bounds.normalize(&v.origin);
                let mut e = vec![0.0; 3 * bins];
                for d in 0..3 {
                    cfg.encode_scalar(u[d].clamp(0.0, 1.0), &mut e[d * bins..(d + 1) * bins], None);
                }
                e
            })
            .collect();
        let mut data = Vec::new();
        let mut pairs = Vec::new();
        let mut row = vec![0.0; width];
        for g in groups {
            for r in g.rows.clone() {
                let p = xv.row_slice(r);
                let x = Vector3::new(p[0], p[1], p[2]);
                for &vi in &g.views {
                    let view = &views[vi];
                    let Some(uv) = project_visible(view, &x) else {
                        continue;
                    };
                    let k = &view.intrinsics;
                    if !view.features.sample_into(uv, k.width, k.height, &mut row[6 * bins..], None) {
                        continue;
                    }
                    row[..3 * bins].copy_from_slice(&origin_enc[vi]);
                    let dir = unit_dir_unit_cube(&view.origin, &x);
                    for d in 0..3 {
                        let s = 3 * bins + d * bins;
                        cfg.encode_scalar(dir[d], &mut row[s..s + bins], None);
                    }
                    data.extend_from_slice(&row);
                    pairs.push((r as u32, vi as u32));
                }
            }
        }
        let seg = Arc::new(pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let out = Tensor::from_vec(pairs.len(), width, data).expect("shape");
        let ng = self.needs(x);
        let var = self.push(
            out,
            Op::RefGather {
                x,
                data: Box::new(RefGatherData {
                    views: views.to_vec(),
                    cfg: *cfg,
                    pairs,
                }),
            },
            ng,
        );
        (var, seg)
    }

    /// Mean of the rows of `x` sharing a segment id; segments with no rows
    /// give zeros. Returns the pooled `n × C` tensor.
    pub fn segment_mean(&mut self, x: Var, seg: &Arc<Vec<u32>>, n: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.rows(), seg.len(), "segment_mean: segment map length");
        let c = xv.cols();
        let mut counts = vec![0u32; n];
        let mut out = Tensor::zeros(n, c);
        for (r, &s) in seg.iter().enumerate() {
            counts[s as usize] += 1;
            let o = out.row_slice_mut(s as usize);
            for (a, b) in o.iter_mut().zip(xv.row_slice(r)) {
                *a += b;
            }
        }
        for (s, &cnt) in counts.iter().enumerate() {
            if cnt > 1 {
                let inv = 1.0 / cnt as f64;
                out.row_slice_mut(s).iter_mut().for_each(|v| *v *= inv);
            }
        }
        let ng = self.needs(x);
        self.push(
            out,
            Op::SegmentMean {
                x,
                seg: seg.clone(),
                counts,
            },
            ng,
        )
    }

    /// Runs reverse accumulation from a `1 × 1` loss. Parameter gradients are
    /// added into `grads`; leaf gradients are returned.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<LeafGrads> {
        if let Some(op) = self.nonfinite {
            return Err(Error::NonFinite(format!("forward value of {op}")));
        }
        let [lr, lc] = self.shape(loss);
        if (lr, lc) != (1, 1) {
            return Err(Error::NotScalar(lr, lc));
        }
        let mut g: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(Tensor::scalar(1.0));
        let mut leaves = LeafGrads::default();
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.grads.push((Var(i), gi));
                continue;
            }
            self.backward_op(i, &gi, &mut g, grads);
        }
        leaves.grads.reverse();
        Ok(leaves)
    }

    fn backward_op(&self, i: usize, gi: &Tensor, g: &mut [Option<Tensor>], grads: &mut Gradients) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Param(id) => {
                grads.entry(*id, y.shape()).add_assign(gi);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wt = self.store.get(*w);
                let (n, k, m) = (xv.rows(), xv.cols(), wt.cols());
                if self.trainable.contains(*w) {
                    let gw = grads.entry(*w, [k, m]);
                    gemm(k, n, m, 1.0, xv.data(), 1, k, gi.data(), m, 1, 1.0, gw.data_mut(), m);
                }
                if self.trainable.contains(*b) {
                    let gb = grads.entry(*b, [1, m]);
                    for r in 0..n {
                        for (a, v) in gb.data_mut().iter_mut().zip(gi.row_slice(r)) {
                            *a += v;
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = slot(g, *x, [n, k]);
                    gemm(n, m, k, 1.0, gi.data(), m, 1, wt.data(), 1, m, 1.0, gx.data_mut(), k);
                }
            }
            Op::Relu(x) => self.elementwise(g, *x, gi, |k| if y.data()[k] > 0.0 { 1.0 } else { 0.0 }),
            Op::Sigmoid(x) => self.elementwise(g, *x, gi, |k| {
                let s = y.data()[k];
                s * (1.0 - s)
            }),
            Op::Abs(x) => {
                let xv = self.value(*x);
                self.elementwise(g, *x, gi, |k| sign(xv.data()[k]))
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                self.elementwise(g, *x, gi, |k| 2.0 * xv.data()[k])
            }
            Op::Sqrt(x) => self.elementwise(g, *x, gi, |k| 0.5 / y.data()[k]),
            Op::Scale(x, c) => self.elementwise(g, *x, gi, |_| *c),
            Op::AddScalar(x) => self.elementwise(g, *x, gi, |_| 1.0),
            Op::Add(a, b) => {
                self.elementwise(g, *a, gi, |_| 1.0);
                self.elementwise(g, *b, gi, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.elementwise(g, *a, gi, |_| 1.0);
                self.elementwise(g, *b, gi, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.elementwise(g, *a, gi, |k| bv.data()[k]);
                self.elementwise(g, *b, gi, |k| av.data()[k]);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.elementwise(g, *a, gi, |k| 1.0 / bv.data()[k]);
                self.elementwise(g, *b, gi, |k| -y.data()[k] / bv.data()[k]);
            }
            Op::Sum(x) => {
                let s = gi.item();
                self.elementwise_uniform(g, *x, s);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                if n > 0 {
                    self.elementwise_uniform(g, *x, gi.item() / n as f64);
                }
            }
            Op::RowL2Norm(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let gx = slot(g, *x, xv.shape());
                    for r in 0..xv.rows() {
                        let norm = y.data()[r];
                        if norm > 0.0 {
                            let s = gi.data()[r] / norm;
                            for (a, v) in gx.row_slice_mut(r).iter_mut().zip(xv.row_slice(r)) {
                                *a += s * v;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let shape = self.shape(*p);
                    if self.needs(*p) {
                        let gp = slot(g, *p, shape);
                        for r in 0..shape[0] {
                            for (a, v) in gp.row_slice_mut(r).iter_mut().zip(&gi.row_slice(r)[off..off + shape[1]]) {
                                *a += v;
                            }
                        }
                    }
                    off += shape[1];
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let shape = self.shape(*p);
                    let len = shape[0] * shape[1];
                    if self.needs(*p) {
                        let gp = slot(g, *p, shape);
                        for (a, v) in gp.data_mut().iter_mut().zip(&gi.data()[off..off + len]) {
                            *a += v;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let gx = slot(g, *x, shape);
                    let c = gi.cols();
                    for r in 0..shape[0] {
                        for (a, v) in gx.row_slice_mut(r)[*start..*start + c].iter_mut().zip(gi.row_slice(r)) {
                            *a += v;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let c = shape[1];
                    let gx = slot(g, *x, shape);
                    let dst = &mut gx.data_mut()[start * c..start * c + gi.len()];
                    for (a, v) in dst.iter_mut().zip(gi.data()) {
                        *a += v;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let gx = slot(g, *x, shape);
                    for (r, &src) in idx.iter().enumerate() {
                        for (a, v) in gx.row_slice_mut(src).iter_mut().zip(gi.row_slice(r)) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let gx = slot(g, *x, shape);
                    for (a, v) in gx.data_mut().iter_mut().zip(gi.data()) {
                        *a += v;
                    }
                }
            }
            Op::SoftmaxCe { logits, targets } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let gx = slot(g, *logits, lv.shape());
                    for r in 0..lv.rows() {
                        let row = lv.row_slice(r);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        let s = gi.data()[r];
                        let gr = gx.row_slice_mut(r);
                        for (c, v) in row.iter().enumerate() {
                            let p = (v - m).exp() / z;
                            let t = if c == targets[r] { 1.0 } else { 0.0 };
                            gr[c] += s * (p - t);
                        }
                    }
                }
            }
            Op::TerminationWeights(occ) => {
                if self.needs(*occ) {
                    let ov = self.value(*occ);
                    let gx = slot(g, *occ, ov.shape());
                    let m = ov.cols();
                    for r in 0..ov.rows() {
                        let o = ov.row_slice(r);
                        let gw = gi.row_slice(r);
                        let gr = gx.row_slice_mut(r);
                        let mut t = vec![1.0; m];
                        for i in 1..m {
                            t[i] = t[i - 1] * (1.0 - o[i - 1]);
                        }
                        // A_i = Σ_{k>i} g_k o_k Π_{i<j<k}(1 − o_j), accumulated from the back.
                        let mut a = 0.0;
                        for i in (0..m).rev() {
                            gr[i] += t[i] * (gw[i] - a);
                            a = gw[i] * o[i] + (1.0 - o[i]) * a;
                        }
                    }
                }
            }
            Op::Integrate { w, v } => {
                let wv = self.value(*w);
                let vv = self.value(*v);
                let (r, m, c) = (wv.rows(), wv.cols(), vv.cols());
                if self.needs(*w) {
                    let gw = slot(g, *w, [r, m]);
                    for ray in 0..r {
                        let gr = gi.row_slice(ray);
                        let dst = gw.row_slice_mut(ray);
                        for (i, d) in dst.iter_mut().enumerate() {
                            let vr = vv.row_slice(ray * m + i);
                            *d += (0..c).map(|k| gr[k] * vr[k]).sum::<f64>();
                        }
                    }
                }
                if self.needs(*v) {
                    let gv = slot(g, *v, [r * m, c]);
                    for ray in 0..r {
                        let gr = gi.row_slice(ray);
                        for (i, &wi) in wv.row_slice(ray).iter().enumerate() {
                            for (a, b) in gv.row_slice_mut(ray * m + i).iter_mut().zip(gr) {
                                *a += wi * b;
                            }
                        }
                    }
                }
            }
            Op::DepthVariance { w, d } => {
                let wv = self.value(*w);
                let dv = self.value(*d);
                let (r, m) = (wv.rows(), wv.cols());
                let need_w = self.needs(*w);
                let need_d = self.needs(*d);
                let mut gw_buf = if need_w { vec![0.0; r * m] } else { Vec::new() };
                let mut gd_buf = if need_d { vec![0.0; r * m] } else { Vec::new() };
                for ray in 0..r {
                    let wr = wv.row_slice(ray);
                    let dr = &dv.data()[ray * m..(ray + 1) * m];
                    let s: f64 = wr.iter().sum();
                    let dh: f64 = wr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    let gr = gi.data()[ray];
                    for i in 0..m {
                        if need_w {
                            gw_buf[ray * m + i] =
                                gr * ((dh - dr[i]) * (dh - dr[i]) + 2.0 * dr[i] * dh * (s - 1.0));
                        }
                        if need_d {
                            gd_buf[ray * m + i] = gr * 2.0 * wr[i] * ((dr[i] - dh) + dh * (s - 1.0));
                        }
                    }
                }
                if need_w {
                    add_into(slot(g, *w, [r, m]), &gw_buf);
                }
                if need_d {
                    add_into(slot(g, *d, [r * m, 1]), &gd_buf);
                }
            }
            Op::OneBlob { x, bounds, deriv } => {
                if self.needs(*x) {
                    let n = self.shape(*x)[0];
                    let width = gi.cols();
                    let bins = width / 3;
                    let e = bounds.extent();
                    let gx = slot(g, *x, [n, 3]);
                    for r in 0..n {
                        let go = gi.row_slice(r);
                        let dr = &deriv[r * width..(r + 1) * width];
                        for d in 0..3 {
                            let s: f64 = (d * bins..(d + 1) * bins).map(|k| go[k] * dr[k]).sum();
                            gx.data_mut()[r * 3 + d] += s / e[d];
                        }
                    }
                }
            }
            Op::HashEncode { x, table, grid, bounds } => {
                let xv = self.value(*x);
                let tv = self.store.get(*table);
                let f = grid.config.features_per_level;
                let need_t = self.trainable.contains(*table);
                let need_x = self.needs(*x);
                let n = xv.rows();
                let e = bounds.extent();
                let mut gx_buf = if need_x { vec![0.0; n * 3] } else { Vec::new() };
                let mut gt = if need_t {
                    Some(grads.entry(*table, tv.shape()))
                } else {
                    None
                };
                for r in 0..n {
                    let p = xv.row_slice(r);
                    let u = bounds.normalize(&Vector3::new(p[0], p[1], p[2]));
                    let go = gi.row_slice(r);
                    for level in 0..grid.config.levels {
                        let gl = &go[level * f..(level + 1) * f];
                        for c in grid.corners(level, u) {
                            if let Some(gt) = gt.as_mut() {
                                let dst = &mut gt.data_mut()[c.row * f..(c.row + 1) * f];
                                for k in 0..f {
                                    dst[k] += c.weight * gl[k];
                                }
                            }
                            if need_x {
                                let row = &tv.data()[c.row * f..(c.row + 1) * f];
                                let s: f64 = (0..f).map(|k| gl[k] * row[k]).sum();
                                for d in 0..3 {
                                    gx_buf[r * 3 + d] += s * c.dweight[d] / e[d];
                                }
                            }
                        }
                    }
                }
                if need_x {
                    add_into(slot(g, *x, [n, 3]), &gx_buf);
                }
            }
            Op::RigidTransform { delta, points, frame } => {
                let dv = self.value(*delta);
                let deltas: Vec<PoseDelta> = (0..dv.rows()).map(|f| PoseDelta::from_slice(dv.row_slice(f))).collect();
                let gd = slot(g, *delta, dv.shape());
                for (r, &f) in frame.iter().enumerate() {
                    let q = Vector3::new(points[3 * r], points[3 * r + 1], points[3 * r + 2]);
                    let j = delta_point_jacobian(&deltas[f], &q);
                    let go = gi.row_slice(r);
                    let dst = gd.row_slice_mut(f);
                    for (row, gv) in j.iter().zip(go) {
                        for c in 0..6 {
                            dst[c] += gv * row[c];
                        }
                    }
                }
            }
            Op::RefGather { x, data } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut gx_buf = vec![0.0; xv.len()];
                    ref_gather_backward(data, xv, gi, &mut gx_buf);
                    add_into(slot(g, *x, xv.shape()), &gx_buf);
                }
            }
            Op::SegmentMean { x, seg, counts } => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let gx = slot(g, *x, shape);
                    for (r, &s) in seg.iter().enumerate() {
                        let inv = 1.0 / counts[s as usize] as f64;
                        for (a, v) in gx.row_slice_mut(r).iter_mut().zip(gi.row_slice(s as usize)) {
                            *a += inv * v;
                        }
                    }
                }
            }
        }
    }

    fn elementwise(&self, g: &mut [Option<Tensor>], x: Var, gi: &Tensor, d: impl Fn(usize) -> f64) {
        if !self.needs(x) {
            return;
        }
        let gx = slot(g, x, self.shape(x));
        for (k, (a, v)) in gx.data_mut().iter_mut().zip(gi.data()).enumerate() {
            *a += v * d(k);
        }
    }

    fn elementwise_uniform(&self, g: &mut [Option<Tensor>], x: Var, s: f64) {
        if !self.needs(x) {
            return;
        }
        let gx = slot(g, x, self.shape(x));
        gx.data_mut().iter_mut().for_each(|a| *a += s);
    }
}

fn slot(g: &mut [Option<Tensor>], v: Var, shape: [usize; 2]) -> &mut Tensor {
    g[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]))
}

fn add_into(t: &mut Tensor, src: &[f64]) {
    for (a, b) in t.data_mut().iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects a world point into a reference view; `None` unless it lies in
/// front of the camera.
fn project_visible(view: &RefView, x: &Vector3<f64>) -> Option<[f64; 2]> {
    let pc = view.world_to_cam.transform_point(x);
    if pc.z <= 1e-6 {
        return None;
    }
    let k = &view.intrinsics;
    Some([k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy])
}

/// Unit vector from `origin` to `x`, mapped from `[−1, 1]` to `[0, 1]`.
fn unit_dir_unit_cube(origin: &Vector3<f64>, x: &Vector3<f64>) -> [f64; 3] {
    let e = x - origin;
    let u = e / e.norm().max(1e-12);
    [0.5 * (u.x + 1.0), 0.5 * (u.y + 1.0), 0.5 * (u.z + 1.0)]
}

fn ref_gather_backward(data: &RefGatherData, xv: &Tensor, gi: &Tensor, gx: &mut [f64]) {
    let bins = data.cfg.bins_per_dim;
    let fdim = gi.cols() - 6 * bins;
    let mut feat = vec![0.0; fdim];
    let mut fgrad = vec![0.0; 2 * fdim];
    let mut enc = vec![0.0; bins];
    let mut denc = vec![0.0; bins];
    for (row, &(pi, vi)) in data.pairs.iter().enumerate() {
        let view = &data.views[vi as usize];
        let p = xv.row_slice(pi as usize);
        let x = Vector3::new(p[0], p[1], p[2]);
        let go = gi.row_slice(row);
        let mut gpt = Vector3::zeros();

        // Direction encoding.
        let e = x - view.origin;
        let len = e.norm().max(1e-12);
        let u = e / len;
        let mut g_u = Vector3::zeros();
        for d in 0..3 {
            data.cfg.encode_scalar(0.5 * (u[d] + 1.0), &mut enc, Some(&mut denc));
            let s = 3 * bins + d * bins;
            g_u[d] = 0.5 * (0..bins).map(|b| go[s + b] * denc[b]).sum::<f64>();
        }
        // d u / d x = (I − u uᵀ) / |e|
        gpt += (g_u - u * u.dot(&g_u)) / len;

        // Image feature through the projection.
        let r = view.world_to_cam.rotation_matrix();
        let pc = view.world_to_cam.transform_point(&x);
        let k = &view.intrinsics;
        let uv = [k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy];
        view.features
            .sample_into(uv, k.width, k.height, &mut feat, Some(&mut fgrad));
        let mut g_uv = [0.0; 2];
        for c in 0..fdim {
            let gc = go[6 * bins + c];
            g_uv[0] += gc * fgrad[2 * c];
            g_uv[1] += gc * fgrad[2 * c + 1];
        }
        let z = pc.z;
        let g_pc = Vector3::new(
            g_uv[0] * k.fx / z,
            g_uv[1] * k.fy / z,
            -(g_uv[0] * k.fx * pc.x + g_uv[1] * k.fy * pc.y) / (z * z),
        );
        gpt += r.transpose() * g_pc;

        for d in 0..3 {
            gx[pi as usize * 3 + d] += gpt[d];
        }
    }
}
