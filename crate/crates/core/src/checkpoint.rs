//! Binary checkpoints.
//!
//! Layout (little-endian, floats as f64):
//!
//! ```text
//! "NESE" | version u32 | input rank u64 | input dims u64* | layer count u64
//! per layer: kind u8 (0 conv2d, 1 conv1d, 2 fc epitome, 3 dense, 4 relu, 5 tanh, 6 pool)
//!   epitome kinds: weight dims 4*u64 | epitome dims 4*u64 | beta_in, beta_out,
//!     group_in, group_out u64 | stride u64 | padding u8 (0 valid, 1 same,
//!     2 explicit + u64) | sampling flags 3*u8 | spatial mode u8 | wrap u8 |
//!     epitome values f64* | routing map ("NESM" section) | learner flag u8
//!     | learner tensors (rank u64, dims u64*, values f64*) * 6
//!   dense: n_in u64 | n_out u64 | weights f64* | bias f64*
//! ```

use std::path::Path;

use crate::bytes::{ByteReader, ByteWriter};
use crate::epitome::{Epitome, LayerPlan, SamplingFlags, Shape4, SpatialMode, WrapPolicy};
use crate::error::{NesError, Result};
use crate::learner::IndexLearner;
use crate::model::{Dense, EpitomeKind, EpitomeLayer, Layer, Model};
use crate::routing::RoutingMap;
use crate::tensor::{ConvGeometry, Padding, Tensor};

const MAGIC: &[u8; 4] = b"NESE";
pub const FORMAT_VERSION: u32 = 1;

/// Where each epitome layer's numbers sit in a serialized checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSections {
    pub layer: usize,
    pub epitome_values: usize,
    pub map_entries: usize,
    pub learner_values: usize,
}

impl LayerSections {
    /// Numbers needed for inference: epitome values plus map entries.
    pub fn stored_numbers(&self) -> usize {
        self.epitome_values + self.map_entries
    }
}

fn write_shape4(w: &mut ByteWriter, s: Shape4) {
    s.as_array().iter().for_each(|&v| w.usize(v));
}

fn read_shape4(r: &mut ByteReader<'_>) -> Result<Shape4> {
    let mut a = [0usize; 4];
    for v in &mut a {
        *v = r.count(0, "dimension")?;
    }
    Ok(Shape4::from(a))
}

fn write_tensor(w: &mut ByteWriter, t: &Tensor) {
    w.usize(t.rank());
    t.shape().iter().for_each(|&d| w.usize(d));
    w.f64s(t.data());
}

fn read_tensor(r: &mut ByteReader<'_>) -> Result<Tensor> {
    let rank = r.count(8, "tensor rank")?;
    let at = r.position();
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.count(0, "tensor dimension")?);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(|| NesError::parse(at, "tensor larger than remaining input"))?;
    let values = r.f64s(n, "tensor values")?;
    Tensor::new(dims, values)
}

fn bool_u8(b: bool) -> u8 {
    b as u8
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.usize(model.input_shape.len());
    model.input_shape.iter().for_each(|&d| w.usize(d));
    w.usize(model.layers.len());
    for l in &model.layers {
        match l {
            Layer::Epitome(e) => {
                w.u8(match e.kind {
                    EpitomeKind::Conv2d => 0,
                    EpitomeKind::Conv1d => 1,
                    EpitomeKind::Fc => 2,
                });
                let p = &e.plan;
                write_shape4(&mut w, p.weight);
                write_shape4(&mut w, p.epitome);
                for v in [p.beta_in, p.beta_out, p.group_in, p.group_out, p.geometry.stride] {
                    w.usize(v);
                }
                match p.geometry.padding {
                    Padding::Valid => w.u8(0),
                    Padding::Same => w.u8(1),
                    Padding::Explicit(n) => {
                        w.u8(2);
                        w.usize(n);
                    }
                }
                w.u8(bool_u8(p.sampling.spatial));
                w.u8(bool_u8(p.sampling.channel));
                w.u8(bool_u8(p.sampling.filter));
                w.u8(match p.spatial_mode {
                    SpatialMode::PerBlock => 0,
                    SpatialMode::Shared => 1,
                });
                w.u8(match p.wrap {
                    WrapPolicy::Circular => 0,
                    WrapPolicy::Strict => 1,
                });
                w.f64s(e.epitome.values().data());
                e.map.write(&mut w);
                match &e.learner {
                    None => w.u8(0),
                    Some(lrn) => {
                        w.u8(1);
                        lrn.params().into_iter().for_each(|t| write_tensor(&mut w, t));
                    }
                }
            }
            Layer::Dense(d) => {
                w.u8(3);
                w.usize(d.weights.shape()[0]);
                w.usize(d.weights.shape()[1]);
                w.f64s(d.weights.data());
                w.f64s(d.bias.data());
            }
            Layer::Relu => w.u8(4),
            Layer::Tanh => w.u8(5),
            Layer::Pool => w.u8(6),
        }
    }
    w.into_inner()
}

/// Parses a checkpoint and reports where each epitome layer's numbers are.
pub fn from_bytes_with_sections(bytes: &[u8]) -> Result<(Model, Vec<LayerSections>)> {
    let mut r = ByteReader::new(bytes);
    r.expect(MAGIC, "checkpoint magic")?;
    let at = r.position();
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(NesError::parse(at, format!("unsupported checkpoint version {version}")));
    }
    let rank = r.count(8, "input rank")?;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.count(0, "input dimension")?);
    }
    let n_layers = r.count(1, "layer count")?;
    let mut layers = Vec::with_capacity(n_layers);
    let mut sections = Vec::new();
    for li in 0..n_layers {
        let at = r.position();
        let tag = r.u8("layer kind")?;
        let layer = match tag {
            0..=2 => {
                let kind = [EpitomeKind::Conv2d, EpitomeKind::Conv1d, EpitomeKind::Fc][tag as usize];
                let weight = read_shape4(&mut r)?;
                let epitome = read_shape4(&mut r)?;
                let mut v = [0usize; 5];
                for x in &mut v {
                    *x = r.count(0, "plan field")?;
                }
                let pat = r.position();
                let padding = match r.u8("padding")? {
                    0 => Padding::Valid,
                    1 => Padding::Same,
                    2 => Padding::Explicit(r.count(0, "padding")?),
                    t => return Err(NesError::parse(pat, format!("unknown padding tag {t}"))),
                };
                let sampling = SamplingFlags {
                    spatial: r.bool("spatial flag")?,
                    channel: r.bool("channel flag")?,
                    filter: r.bool("filter flag")?,
                };
                let spatial_mode = if r.bool("spatial mode")? {
                    SpatialMode::Shared
                } else {
                    SpatialMode::PerBlock
                };
                let wrap = if r.bool("wrap policy")? {
                    WrapPolicy::Strict
                } else {
                    WrapPolicy::Circular
                };
                let plan = LayerPlan::new(weight, epitome)
                    .and_then(|p| p.with_betas(v[0], v[1]))
                    .and_then(|p| p.with_groups(v[2], v[3]))
                    .map_err(|e| NesError::parse(at, format!("layer {li}: {e}")))?
                    .with_geometry(ConvGeometry::new(v[4], padding))
                    .with_sampling(sampling)
                    .with_spatial_mode(spatial_mode)
                    .with_wrap(wrap);
                plan.validate().map_err(|e| NesError::parse(at, format!("layer {li}: {e}")))?;
                let n = epitome.numel();
                if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                    return Err(r.error("epitome larger than remaining input"));
                }
                let values = Tensor::new(epitome.as_array().to_vec(), r.f64s(n, "epitome values")?)?;
                let mat = r.position();
                let map = RoutingMap::read(&mut r)?;
                map.matches(&plan)
                    .map_err(|e| NesError::parse(mat, format!("layer {li}: {e}")))?;
                let lat = r.position();
                let learner = if r.bool("learner flag")? {
                    let params = (0..6).map(|_| read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
                    let l = IndexLearner::from_params(params)
                        .map_err(|e| NesError::parse(lat, format!("layer {li}: {e}")))?;
                    if l.outputs() != plan.index_count() || l.in_channels() != weight.c_in {
                        return Err(NesError::parse(lat, format!("layer {li}: learner does not fit the plan")));
                    }
                    Some(l)
                } else {
                    None
                };
                sections.push(LayerSections {
                    layer: li,
                    epitome_values: n,
                    map_entries: map.entries().len(),
                    learner_values: learner.as_ref().map_or(0, |l| l.param_count()),
                });
                Layer::Epitome(Box::new(EpitomeLayer {
                    kind,
                    plan,
                    epitome: Epitome::new(values)?,
                    map,
                    learner,
                }))
            }
            3 => {
                let n_in = r.count(0, "dense inputs")?;
                let n_out = r.count(0, "dense outputs")?;
                let n = n_in
                    .checked_mul(n_out)
                    .and_then(|n| n.checked_add(n_out))
                    .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                    .ok_or_else(|| r.error("dense layer larger than remaining input"))?;
                let _ = n;
                let weights = Tensor::new(vec![n_in, n_out], r.f64s(n_in * n_out, "dense weights")?)?;
                let bias = Tensor::new(vec![n_out], r.f64s(n_out, "dense bias")?)?;
                Layer::Dense(Dense { weights, bias })
            }
            4 => Layer::Relu,
            5 => Layer::Tanh,
            6 => Layer::Pool,
            t => return Err(NesError::parse(at, format!("unknown layer kind {t}"))),
        };
        layers.push(layer);
    }
    r.finish()?;
    let model = Model { input_shape, layers };
    model
        .output_shape()
        .map_err(|e| NesError::parse(0, format!("inconsistent layer shapes: {e}")))?;
    Ok((model, sections))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    from_bytes_with_sections(bytes).map(|(m, _)| m)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
