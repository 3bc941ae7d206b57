//! Scene representation: shared hash grid, one geometry head per semantic
//! class, a coarse head, and color/semantic heads conditioned on pooled
//! reference-image features.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{
    Activation, Checkpoint, ConvEncoder, FeatureMap, Mlp, ParamId, ParamStore, RefGroup, RefView, Tape,
    Tensor, Var,
};
use crate::encoding::{HashGrid, HashGridConfig, OneBlobConfig, SceneBounds};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub bounds: SceneBounds,
    pub oneblob_bins: usize,
    pub grid_levels: usize,
    pub grid_base_resolution: usize,
    /// Finest voxel edge in metres; sets the top grid resolution.
    pub finest_voxel: f64,
    pub grid_features_per_level: usize,
    pub grid_log2_table_size: u32,
    pub hidden: usize,
    pub latent_dim: usize,
    /// Channels of the frozen image encoder.
    pub image_channels: usize,
    /// Width of the encoded per-reference feature.
    pub pooled_dim: usize,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            bounds: SceneBounds {
                min: [-1.6; 3],
                max: [1.6; 3],
            },
            oneblob_bins: 16,
            grid_levels: 16,
            grid_base_resolution: 16,
            finest_voxel: 0.02,
            grid_features_per_level: 2,
            grid_log2_table_size: 15,
            hidden: 32,
            latent_dim: 16,
            image_channels: 16,
            pooled_dim: 16,
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn oneblob(&self) -> OneBlobConfig {
        OneBlobConfig::with_bins(self.oneblob_bins)
    }

    pub fn grid(&self) -> HashGridConfig {
        HashGridConfig {
            levels: self.grid_levels,
            base_resolution: self.grid_base_resolution,
            max_resolution: self.grid_base_resolution,
            features_per_level: self.grid_features_per_level,
            log2_table_size: self.grid_log2_table_size,
        }
        .with_finest_voxel(&self.bounds, self.finest_voxel)
    }

    pub fn validate(&self) -> Result<()> {
        SceneBounds::new(self.bounds.min, self.bounds.max)?;
        self.oneblob().validate()?;
        self.grid().validate()?;
        if !(self.finest_voxel > 0.0) {
            return Err(Error::Config("finest_voxel must be positive".into()));
        }
        if self.hidden == 0 || self.latent_dim == 0 || self.image_channels == 0 || self.pooled_dim == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of the encoded reference features that see a point.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature {
    pub vector: Vec<f64>,
    pub contributing_refs: usize,
}

/// Latents and occupancies of a batch of points.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryOut {
    pub latent: Tensor,
    pub occ: Vec<f64>,
}

/// Tape handles for the point encodings shared by all heads.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub oneblob: Var,
    /// `[oneblob, hash features]`, the geometry-head input.
    pub input: Var,
}

#[derive(Clone, Debug)]
struct SemColumn {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct SceneField {
    pub config: FieldConfig,
    pub params: ParamStore,
    pub grid: Arc<HashGrid>,
    pub table: ParamId,
    pub encoder: ConvEncoder,
    heads: BTreeMap<u16, Mlp>,
    class_order: Vec<u16>,
    warming: BTreeSet<u16>,
    coarse: Mlp,
    color: Mlp,
    sem_trunk: Mlp,
    sem_out: BTreeMap<u16, SemColumn>,
    ref_encoder: Mlp,
}

const TABLE: &str = "grid.table";

impl SceneField {
    pub fn new(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let grid = Arc::new(HashGrid::new(config.grid())?);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let rows = grid.table_rows();
        let f = config.grid_features_per_level;
        let table_init = {
            use rand::Rng;
            (0..rows * f).map(|_| rng.random_range(-1e-4..1e-4)).collect()
        };
        let table = params.add(TABLE, Tensor::from_vec(rows, f, table_init)?)?;
        let d = Dims::of(&config, grid.output_len());
        let coarse = Mlp::new(&mut params, "coarse", &d.geometry(), Activation::Linear, &mut rng)?;
        let color = Mlp::new(&mut params, "color", &d.appearance(3), Activation::Sigmoid, &mut rng)?;
        let mut trunk_dims = d.appearance(1);
        trunk_dims.pop();
        let sem_trunk = Mlp::new(&mut params, "sem.trunk", &trunk_dims, Activation::Relu, &mut rng)?;
        let ref_encoder = Mlp::new(&mut params, "ref", &d.reference(), Activation::Linear, &mut rng)?;
        let encoder = ConvEncoder::new(config.image_channels, config.seed ^ 0x5eed_c0de);
        Ok(Self {
            config,
            params,
            grid,
            table,
            encoder,
            heads: BTreeMap::new(),
            class_order: Vec::new(),
            warming: BTreeSet::new(),
            coarse,
            color,
            sem_trunk,
            sem_out: BTreeMap::new(),
            ref_encoder,
        })
    }

    pub fn bounds(&self) -> &SceneBounds {
        &self.config.bounds
    }

    /// Registered classes in semantic-logit order.
    pub fn class_ids(&self) -> &[u16] {
        &self.class_order
    }

    pub fn class_index(&self, id: u16) -> Option<usize> {
        self.class_order.iter().position(|c| *c == id)
    }

    pub fn has_class(&self, id: u16) -> bool {
        self.heads.contains_key(&id)
    }

    pub fn is_warming(&self, id: u16) -> bool {
        self.warming.contains(&id)
    }

    pub fn finish_warmup(&mut self, id: u16) {
        self.warming.remove(&id);
    }

    /// Adds a geometry head and a zero-initialized semantic logit for a new
    /// class. The head is flagged as warming until [`Self::finish_warmup`].
    pub fn add_class(&mut self, id: u16) -> Result<()> {
        if self.heads.contains_key(&id) {
            return Err(Error::DuplicateClass(id));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (id as u64 + 1));
        let d = Dims::of(&self.config, self.grid.output_len());
        let head = Mlp::new(&mut self.params, &format!("geo.{id}"), &d.geometry(), Activation::Linear, &mut rng)?;
        let w = self
            .params
            .add(format!("sem.out.{id}.w"), Tensor::zeros(self.config.hidden, 1))?;
        let b = self.params.add(format!("sem.out.{id}.b"), Tensor::zeros(1, 1))?;
        self.heads.insert(id, head);
        self.sem_out.insert(id, SemColumn { w, b });
        self.class_order.push(id);
        self.warming.insert(id);
        Ok(())
    }

    pub fn head(&self, id: u16) -> Result<&Mlp> {
        self.heads.get(&id).ok_or(Error::UnknownClass(id))
    }

    /// Parameters owned exclusively by one class.
    pub fn class_param_ids(&self, id: u16) -> Result<Vec<ParamId>> {
        let mut ids = self.head(id)?.param_ids();
        let col = &self.sem_out[&id];
        ids.extend([col.w, col.b]);
        Ok(ids)
    }

    pub fn coarse_param_ids(&self) -> Vec<ParamId> {
        self.coarse.param_ids()
    }

    pub fn color_param_ids(&self) -> Vec<ParamId> {
        self.color.param_ids()
    }

    pub fn ref_encoder_param_ids(&self) -> Vec<ParamId> {
        self.ref_encoder.param_ids()
    }

    /// Copies a class head's weights into the coarse head.
    pub fn copy_head_into_coarse(&mut self, id: u16) -> Result<()> {
        let src = self.head(id)?.param_ids();
        for (s, d) in src.into_iter().zip(self.coarse.param_ids()) {
            let v = self.params.get(s).clone();
            *self.params.get_mut(d) = v;
        }
        Ok(())
    }

    pub fn image_features(&self, rgb: &[f64], width: usize, height: usize) -> FeatureMap {
        self.encoder.features(rgb, width, height)
    }

    /// One-blob and hash encodings of world points `x` (`n × 3`).
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Encoded {
        let oneblob = tape.oneblob(x, &self.config.bounds, &self.config.oneblob());
        let hash = tape.hash_encode(x, self.table, &self.grid, &self.config.bounds);
        let input = tape.concat_cols(&[oneblob, hash]);
        Encoded { oneblob, input }
    }

    /// Latent `h` and occupancy of the class head; the occupancy is the
    /// logistic of the first latent channel.
    pub fn geometry(&self, tape: &mut Tape, id: u16, input: Var) -> Result<(Var, Var)> {
        let h = self.head(id)?.forward(tape, input)?;
        Ok((h, occupancy_of(tape, h)))
    }

    pub fn coarse(&self, tape: &mut Tape, input: Var) -> Result<(Var, Var)> {
        let h = self.coarse.forward(tape, input)?;
        Ok((h, occupancy_of(tape, h)))
    }

    /// Pooled reference features for points `x` (`n × 3`).
    pub fn pooled(&self, tape: &mut Tape, x: Var, views: &[RefView], groups: &[RefGroup]) -> Result<Var> {
        let n = tape.shape(x)[0];
        if views.is_empty() || groups.iter().all(|g| g.views.is_empty()) {
            return Ok(tape.constant(Tensor::zeros(n, self.config.pooled_dim)));
        }
        let (rows, seg) = tape.ref_gather(x, views, groups, &self.config.bounds, &self.config.oneblob());
        let enc = self.ref_encoder.forward(tape, rows)?;
        Ok(tape.segment_mean(enc, &seg, n))
    }

    pub fn color(&self, tape: &mut Tape, oneblob: Var, h: Var, pooled: Var) -> Result<Var> {
        let input = tape.concat_cols(&[oneblob, h, pooled]);
        self.color.forward(tape, input)
    }

    /// Semantic logits in [`Self::class_ids`] order.
    pub fn semantic(&self, tape: &mut Tape, oneblob: Var, h: Var, pooled: Var) -> Result<Var> {
        let input = tape.concat_cols(&[oneblob, h, pooled]);
        let t = self.sem_trunk.forward(tape, input)?;
        if self.class_order.is_empty() {
            return Err(Error::Config("no classes registered".into()));
        }
        let cols: Vec<Var> = self
            .class_order
            .iter()
            .map(|id| {
                let c = &self.sem_out[id];
                tape.linear(t, c.w, c.b)
            })
            .collect();
        Ok(tape.concat_cols(&cols))
    }

    fn points_tensor(points: &[Vector3<f64>]) -> Tensor {
        let data = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Tensor::from_vec(points.len(), 3, data).expect("shape")
    }

    pub fn eval_geometry(&self, id: u16, points: &[Vector3<f64>]) -> Result<GeometryOut> {
        let mut tape = Tape::frozen(&self.params);
        let x = tape.constant(Self::points_tensor(points));
        let e = self.encode(&mut tape, x);
        let (h, o) = self.geometry(&mut tape, id, e.input)?;
        Ok(GeometryOut {
            latent: tape.value(h).clone(),
            occ: tape.value(o).data().to_vec(),
        })
    }

    pub fn eval_coarse(&self, points: &[Vector3<f64>]) -> Result<GeometryOut> {
        let mut tape = Tape::frozen(&self.params);
        let x = tape.constant(Self::points_tensor(points));
        let e = self.encode(&mut tape, x);
        let (h, o) = self.coarse(&mut tape, e.input)?;
        Ok(GeometryOut {
            latent: tape.value(h).clone(),
            occ: tape.value(o).data().to_vec(),
        })
    }

    pub fn gather_reference_features(&self, points: &[Vector3<f64>], refs: &[RefView]) -> Result<Vec<PooledFeature>> {
        let mut tape = Tape::frozen(&self.params);
        let x = tape.constant(Self::points_tensor(points));
        let groups = [RefGroup {
            rows: 0..points.len(),
            views: (0..refs.len()).collect(),
        }];
        let pooled = self.pooled(&mut tape, x, refs, &groups)?;
        let v = tape.value(pooled);
        Ok(points
            .iter()
            .enumerate()
            .map(|(i, p)| PooledFeature {
                vector: v.row_slice(i).to_vec(),
                contributing_refs: refs.iter().filter(|r| sees(r, p)).count(),
            })
            .collect())
    }

    fn eval_appearance(&self, points: &[Vector3<f64>], latent: &Tensor, pooled: &Tensor, color: bool) -> Result<Tensor> {
        let mut tape = Tape::frozen(&self.params);
        let x = tape.constant(Self::points_tensor(points));
        let ob = tape.oneblob(x, &self.config.bounds, &self.config.oneblob());
        let h = tape.constant(latent.clone());
        let p = tape.constant(pooled.clone());
        let out = if color {
            self.color(&mut tape, ob, h, p)?
        } else {
            self.semantic(&mut tape, ob, h, p)?
        };
        Ok(tape.value(out).clone())
    }

    pub fn eval_color(&self, points: &[Vector3<f64>], latent: &Tensor, pooled: &Tensor) -> Result<Tensor> {
        self.eval_appearance(points, latent, pooled, true)
    }

    pub fn eval_semantic(&self, points: &[Vector3<f64>], latent: &Tensor, pooled: &Tensor) -> Result<Tensor> {
        self.eval_appearance(points, latent, pooled, false)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = BTreeMap::new();
        meta.insert(
            "field.config".to_string(),
            toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?,
        );
        meta.insert("field.classes".to_string(), join_ids(&self.class_order));
        meta.insert(
            "field.warming".to_string(),
            join_ids(&self.warming.iter().copied().collect::<Vec<_>>()),
        );
        Ok(Checkpoint {
            params: self.params.clone(),
            meta,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg_text = ckpt
            .meta
            .get("field.config")
            .ok_or_else(|| Error::Config("checkpoint has no field.config".into()))?;
        let config: FieldConfig = toml::from_str(cfg_text).map_err(|e| Error::Config(e.to_string()))?;
        let mut field = SceneField::new(config)?;
        for id in split_ids(ckpt.meta.get("field.classes").map_or("", |s| s))? {
            field.add_class(id)?;
        }
        field.warming = split_ids(ckpt.meta.get("field.warming").map_or("", |s| s))?
            .into_iter()
            .collect();
        if field.params.len() != ckpt.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, field expects {}",
                ckpt.params.len(),
                field.params.len()
            )));
        }
        for (id, name, t) in ckpt.params.iter() {
            let dst = field
                .params
                .id(name)
                .ok_or_else(|| Error::Config(format!("unexpected tensor {name}")))?;
            if field.params.get(dst).shape() != t.shape() {
                return Err(Error::Shape(format!("tensor {name} has shape {:?}", t.shape())));
            }
            *field.params.get_mut(dst) = ckpt.params.get(id).clone();
        }
        Ok(field)
    }
}

struct Dims {
    ob: usize,
    hash: usize,
    hidden: usize,
    latent: usize,
    image: usize,
    pooled: usize,
}

impl Dims {
    fn of(c: &FieldConfig, hash: usize) -> Self {
        Self {
            ob: 3 * c.oneblob_bins,
            hash,
            hidden: c.hidden,
            latent: c.latent_dim,
            image: c.image_channels,
            pooled: c.pooled_dim,
        }
    }

    fn geometry(&self) -> Vec<usize> {
        vec![self.ob + self.hash, self.hidden, self.hidden, self.latent]
    }

    fn appearance(&self, out: usize) -> Vec<usize> {
        vec![self.ob + self.latent + self.pooled, self.hidden, self.hidden, out]
    }

    fn reference(&self) -> Vec<usize> {
        vec![2 * self.ob + self.image, self.hidden, self.hidden, self.pooled]
    }
}

fn occupancy_of(tape: &mut Tape, h: Var) -> Var {
    let logit = tape.slice_cols(h, 0, 1);
    tape.sigmoid(logit)
}

fn sees(view: &RefView, p: &Vector3<f64>) -> bool {
    let pc = view.world_to_cam.transform_point(p);
    if pc.z <= 1e-6 {
        return false;
    }
    let k = &view.intrinsics;
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    u >= 0.0 && v >= 0.0 && u <= (k.width - 1) as f64 && v <= (k.height - 1) as f64
}

fn join_ids(ids: &[u16]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn split_ids(s: &str) -> Result<Vec<u16>> {
    s.split(',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Config(format!("bad class id {t:?}"))))
        .collect()
}
