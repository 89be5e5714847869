//! Sequential models built from epitome layers, dense layers, activations
//! and global pooling, with a batch training path and a learner-free
//! inference path.

use crate::autograd::{backward_epitome, backward_indices, conv2d_backward};
use crate::config::{EpitomeSpec, IndexMode, ModelConfig, ModelLayerConfig, WrapSetting};
use crate::epitome::{expand_weights, Epitome, IndexSet, LayerPlan, Shape4, WrapPolicy};
use crate::error::{NesError, Result};
use crate::infer::{infer, MaddReport};
use crate::learner::{scale_indices, scale_jacobian, IndexLearner, LearnerTrace};
use crate::routing::RoutingMap;
use crate::tensor::{conv2d_naive, ConvGeometry, Padding, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpitomeKind {
    Conv2d,
    Conv1d,
    Fc,
}

impl EpitomeKind {
    /// Rank of the layer's per-sample input.
    pub fn input_rank(self) -> usize {
        match self {
            EpitomeKind::Conv2d => 3,
            EpitomeKind::Conv1d => 2,
            EpitomeKind::Fc => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpitomeLayer {
    pub kind: EpitomeKind,
    pub plan: LayerPlan,
    pub epitome: Epitome,
    pub map: RoutingMap,
    pub learner: Option<IndexLearner>,
}

impl EpitomeLayer {
    /// Epitome values plus routing-map entries.
    pub fn stored_numbers(&self) -> usize {
        self.epitome.len() + self.map.stored_numbers()
    }

    pub fn expanded(&self, idx: &IndexSet) -> Result<Tensor> {
        expand_weights(&self.epitome, &self.plan, idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[N_in, N_out]`.
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Epitome(Box<EpitomeLayer>),
    Dense(Dense),
    Relu,
    Tanh,
    /// Global average over all spatial positions, leaving `[C]`.
    Pool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

fn to_3d(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let shape = match s.len() {
        1 => vec![1, 1, s[0]],
        2 => vec![s[0], 1, s[1]],
        3 => s.to_vec(),
        _ => {
            return Err(NesError::DimensionMismatch {
                op: "layer input rank",
                left: s.to_vec(),
                right: vec![3],
            })
        }
    };
    x.clone().reshape(&shape)
}

fn from_3d(x: Tensor, rank: usize) -> Result<Tensor> {
    let s = x.shape().to_vec();
    match rank {
        1 => x.reshape(&[s[0] * s[1] * s[2]]),
        2 => x.reshape(&[s[0], s[2]]),
        _ => Ok(x),
    }
}

fn same_geometry(stride: usize) -> ConvGeometry {
    ConvGeometry::new(stride, Padding::Same)
}

impl Model {
    /// Builds a freshly initialized model. Epitomes use He-style scaling on
    /// the logical fan-in; routing maps start at zero and are re-seeded from
    /// the first training batch.
    pub fn from_config(cfg: &ModelConfig, input_shape: &[usize], wrap: WrapSetting, rng: &mut Rng) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for (i, l) in cfg.layers.iter().enumerate() {
            let layer = match l {
                ModelLayerConfig::Conv2d(spec) => build_epitome(EpitomeKind::Conv2d, spec, &shape, wrap, rng, i)?,
                ModelLayerConfig::Conv1d(spec) => build_epitome(EpitomeKind::Conv1d, spec, &shape, wrap, rng, i)?,
                ModelLayerConfig::Fc(spec) => build_epitome(EpitomeKind::Fc, spec, &shape, wrap, rng, i)?,
                ModelLayerConfig::Dense { out } => {
                    if *out == 0 {
                        return Err(NesError::config(format!("layer {i}: dense out must be >= 1")));
                    }
                    let n_in: usize = shape.iter().product();
                    Layer::Dense(Dense {
                        weights: Tensor::randn(&[n_in, *out], 1.0 / (n_in as f64).sqrt(), rng),
                        bias: Tensor::zeros(&[*out]),
                    })
                }
                ModelLayerConfig::Relu => Layer::Relu,
                ModelLayerConfig::Tanh => Layer::Tanh,
                ModelLayerConfig::Pool => Layer::Pool,
            };
            shape = output_shape(&layer, &shape)?;
            layers.push(layer);
        }
        Ok(Model {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.layers.iter().try_fold(self.input_shape.clone(), |s, l| output_shape(l, &s))
    }

    pub fn epitome_layers(&self) -> impl Iterator<Item = &EpitomeLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Epitome(e) => Some(&**e),
            _ => None,
        })
    }

    pub fn freeze(&mut self) {
        for l in &mut self.layers {
            if let Layer::Epitome(e) = l {
                e.map.freeze();
            }
        }
    }

    /// Drops every indexing learner; inference needs only epitomes and maps.
    pub fn strip_learners(&mut self) {
        for l in &mut self.layers {
            if let Layer::Epitome(e) = l {
                e.learner = None;
            }
        }
    }

    /// Learner-free inference of one sample through the fast engine.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Vec<MaddReport>)> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(NesError::DimensionMismatch {
                op: "model input",
                left: x.shape().to_vec(),
                right: self.input_shape.clone(),
            });
        }
        let mut reports = Vec::new();
        let mut cur = x.clone();
        for l in &self.layers {
            cur = match l {
                Layer::Epitome(e) => {
                    let (y, rep) = infer(&cur, &e.epitome, &e.map, &e.plan)?;
                    reports.push(rep);
                    y
                }
                other => apply_simple(other, &cur)?,
            };
        }
        Ok((cur, reports))
    }
}

fn build_epitome(
    kind: EpitomeKind,
    spec: &EpitomeSpec,
    shape: &[usize],
    wrap: WrapSetting,
    rng: &mut Rng,
    i: usize,
) -> Result<Layer> {
    if shape.len() != kind.input_rank() {
        return Err(NesError::config(format!(
            "layer {i}: {kind:?} expects rank-{} input, got {shape:?}",
            kind.input_rank()
        )));
    }
    let c_in = *shape.last().unwrap();
    let weight = match kind {
        EpitomeKind::Conv2d => Shape4::new(spec.kernel, spec.kernel, c_in, spec.out),
        EpitomeKind::Conv1d => Shape4::new(spec.kernel, 1, c_in, spec.out),
        EpitomeKind::Fc => Shape4::new(1, 1, c_in, spec.out),
    };
    let e = Shape4::from(spec.epitome);
    if e.numel() >= weight.numel() {
        return Err(NesError::config(format!(
            "layer {i}: epitome holds {} numbers, not fewer than the {} weights it generates",
            e.numel(),
            weight.numel()
        )));
    }
    let mut plan = LayerPlan::new(weight, e)?
        .with_geometry(same_geometry(spec.stride))
        .with_wrap(match wrap {
            WrapSetting::Circular => WrapPolicy::Circular,
            WrapSetting::Strict => WrapPolicy::Strict,
        });
    if let Some([bi, bo]) = spec.betas {
        plan = plan.with_betas(bi, bo)?;
    }
    if let Some([gi, go]) = spec.groups {
        plan = plan.with_groups(gi, go)?;
    }
    let fan_in = (weight.w * weight.h * weight.c_in) as f64;
    let epitome = Epitome::random(e, (2.0 / fan_in).sqrt(), rng)?;
    let map = RoutingMap::from_indices(&plan, &IndexSet::zeros(&plan))?;
    let learner = spec
        .learner
        .then(|| IndexLearner::new(c_in, kind == EpitomeKind::Conv2d && shape[1] > 1, plan.index_count(), rng));
    Ok(Layer::Epitome(Box::new(EpitomeLayer {
        kind,
        plan,
        epitome,
        map,
        learner,
    })))
}

fn output_shape(layer: &Layer, shape: &[usize]) -> Result<Vec<usize>> {
    Ok(match layer {
        Layer::Epitome(e) => {
            let p = &e.plan;
            match e.kind {
                EpitomeKind::Fc => vec![p.weight.c_out],
                EpitomeKind::Conv1d => {
                    let (w, _) = p.geometry.output_extent(shape[0], p.weight.w)?;
                    vec![w, p.weight.c_out]
                }
                EpitomeKind::Conv2d => {
                    let (w, _) = p.geometry.output_extent(shape[0], p.weight.w)?;
                    let (h, _) = p.geometry.output_extent(shape[1], p.weight.h)?;
                    vec![w, h, p.weight.c_out]
                }
            }
        }
        Layer::Dense(d) => {
            let n: usize = shape.iter().product();
            if n != d.weights.shape()[0] {
                return Err(NesError::DimensionMismatch {
                    op: "dense input",
                    left: shape.to_vec(),
                    right: d.weights.shape().to_vec(),
                });
            }
            vec![d.weights.shape()[1]]
        }
        Layer::Relu | Layer::Tanh => shape.to_vec(),
        Layer::Pool => vec![*shape.last().unwrap_or(&0)],
    })
}

fn dense_forward(d: &Dense, x: &Tensor) -> Result<Tensor> {
    let (n_in, n_out) = (d.weights.shape()[0], d.weights.shape()[1]);
    if x.len() != n_in {
        return Err(NesError::DimensionMismatch {
            op: "dense input",
            left: x.shape().to_vec(),
            right: vec![n_in],
        });
    }
    let w = d.weights.data();
    let mut y = d.bias.data().to_vec();
    for (i, xv) in x.data().iter().enumerate() {
        for o in 0..n_out {
            y[o] += xv * w[i * n_out + o];
        }
    }
    Tensor::new(vec![n_out], y)
}

fn pool_forward(x: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().unwrap_or(&0);
    let positions = (x.len() / c.max(1)).max(1);
    let mut y = vec![0.0; c];
    for (k, v) in x.data().iter().enumerate() {
        y[k % c] += v;
    }
    y.iter_mut().for_each(|v| *v /= positions as f64);
    Tensor::new(vec![c], y)
}

fn apply_simple(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Dense(d) => dense_forward(d, x),
        Layer::Relu => Ok(x.map(|v| v.max(0.0))),
        Layer::Tanh => Ok(x.map(f64::tanh)),
        Layer::Pool => pool_forward(x),
        Layer::Epitome(_) => unreachable!("epitome layers are handled by the caller"),
    }
}

/// Which indices an epitome layer uses in a batch forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardIndices {
    /// Training step per [`IndexMode`]; updates routing maps.
    Train(IndexMode),
    /// Current routing-map entries, maps untouched.
    Map,
}

#[derive(Debug, Clone)]
struct EpitomeCache {
    used: IndexSet,
    weights: Tensor,
    trace: Option<LearnerTrace>,
    fresh: Option<IndexSet>,
}

/// Activations of one batch forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    /// `acts[l]` holds the inputs of layer `l`; the last entry the outputs.
    acts: Vec<Vec<Tensor>>,
    caches: Vec<Option<EpitomeCache>>,
}

impl BatchTrace {
    pub fn outputs(&self) -> &[Tensor] {
        self.acts.last().unwrap()
    }

    /// Fresh learner indices per epitome layer (`None` without a learner).
    pub fn fresh_indices(&self) -> Vec<Option<IndexSet>> {
        self.caches.iter().flatten().map(|c| c.fresh.clone()).collect()
    }

    /// Indices each epitome layer actually used.
    pub fn used_indices(&self) -> Vec<IndexSet> {
        self.caches.iter().flatten().map(|c| c.used.clone()).collect()
    }
}

fn batch_mean(xs: &[Tensor]) -> Result<Tensor> {
    let mut m = to_3d(&xs[0])?;
    for x in &xs[1..] {
        m.axpy(1.0, &to_3d(x)?)?;
    }
    Ok(m.scale(1.0 / xs.len() as f64))
}

/// Runs a batch through the naive (expand-then-convolve) path. Each epitome
/// layer's learner sees the batch-mean input, so one index set serves the
/// whole batch.
pub fn forward_batch(model: &mut Model, xs: &[Tensor], mode: ForwardIndices) -> Result<BatchTrace> {
    if xs.is_empty() {
        return Err(NesError::config("empty batch"));
    }
    let mut acts = vec![xs.to_vec()];
    let mut caches = Vec::with_capacity(model.layers.len());
    for layer in &mut model.layers {
        let input = acts.last().unwrap();
        let (out, cache) = match layer {
            Layer::Epitome(e) => {
                let (trace, fresh) = match &e.learner {
                    Some(l) => {
                        let t = l.forward(&batch_mean(input)?)?;
                        let idx = scale_indices(&t.output, &e.plan)?;
                        (Some(t), Some(idx))
                    }
                    None => (None, None),
                };
                let used = match (mode, &fresh) {
                    (ForwardIndices::Train(IndexMode::Fresh), Some(f)) => f.clone(),
                    (ForwardIndices::Train(IndexMode::Ema), Some(f)) => {
                        e.map.update(f)?;
                        e.map.indices()
                    }
                    _ => e.map.indices(),
                };
                let weights = e.expanded(&used)?;
                let out = input
                    .iter()
                    .map(|x| {
                        let y = conv2d_naive(&to_3d(x)?, &weights, e.plan.geometry)?;
                        from_3d(y, x.rank())
                    })
                    .collect::<Result<Vec<_>>>()?;
                (
                    out,
                    Some(EpitomeCache {
                        used,
                        weights,
                        trace,
                        fresh,
                    }),
                )
            }
            other => (
                input.iter().map(|x| apply_simple(other, x)).collect::<Result<Vec<_>>>()?,
                None,
            ),
        };
        acts.push(out);
        caches.push(cache);
    }
    Ok(BatchTrace { acts, caches })
}

/// Parameter gradients of one layer, in the order [`apply_sgd`] expects.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Epitome {
        epitome: Tensor,
        indices: Vec<f64>,
        learner: Option<Vec<Tensor>>,
    },
    Dense {
        weights: Tensor,
        bias: Tensor,
    },
    None,
}

/// Backpropagates per-sample output gradients through the batch trace.
/// In [`IndexMode::Ema`] the learner receives `(1 - mu)` times the index
/// gradient, the weight fresh indices carry in the moving average.
pub fn backward_batch(model: &Model, trace: &BatchTrace, d_out: Vec<Tensor>, mode: IndexMode) -> Result<Vec<LayerGrads>> {
    let b = d_out.len();
    let mut grads = vec![LayerGrads::None; model.layers.len()];
    let mut dy = d_out;
    for (l, layer) in model.layers.iter().enumerate().rev() {
        let xs = &trace.acts[l];
        let ys = &trace.acts[l + 1];
        let dx: Vec<Tensor> = match layer {
            Layer::Epitome(e) => {
                let cache = trace.caches[l].as_ref().expect("epitome cache");
                let mut d_w = Tensor::zeros(cache.weights.shape());
                let mut dx = Vec::with_capacity(b);
                for (x, g) in xs.iter().zip(&dy) {
                    let (dxi, dwi) = conv2d_backward(&to_3d(x)?, &cache.weights, e.plan.geometry, &to_3d(g)?)?;
                    d_w.axpy(1.0, &dwi)?;
                    dx.push(dxi);
                }
                let d_e = backward_epitome(&d_w, &e.plan, &cache.used)?;
                let d_idx = backward_indices(&d_w, &e.epitome, &e.plan, &cache.used)?;
                let learner = match (&e.learner, &cache.trace) {
                    (Some(lrn), Some(t)) => {
                        let through = match mode {
                            IndexMode::Fresh => 1.0,
                            IndexMode::Ema => 1.0 - e.map.momentum(),
                        };
                        let jac = scale_jacobian(&e.plan);
                        let d_norm: Vec<f64> = d_idx.iter().zip(&jac).map(|(g, j)| through * g * j).collect();
                        let lg = lrn.backward(t, &d_norm)?;
                        let share = lg.input.scale(1.0 / b as f64);
                        for d in &mut dx {
                            d.axpy(1.0, &share)?;
                        }
                        Some(lg.params)
                    }
                    _ => None,
                };
                grads[l] = LayerGrads::Epitome {
                    epitome: d_e,
                    indices: d_idx,
                    learner,
                };
                dx.into_iter()
                    .zip(xs)
                    .map(|(d, x)| d.reshape(x.shape()))
                    .collect::<Result<Vec<_>>>()?
            }
            Layer::Dense(d) => {
                let (n_in, n_out) = (d.weights.shape()[0], d.weights.shape()[1]);
                let w = d.weights.data();
                let mut gw = vec![0.0; n_in * n_out];
                let mut gb = vec![0.0; n_out];
                let mut dx = Vec::with_capacity(b);
                for (x, g) in xs.iter().zip(&dy) {
                    let g = g.data();
                    let mut dxi = vec![0.0; n_in];
                    for (i, xv) in x.data().iter().enumerate() {
                        let mut acc = 0.0;
                        for o in 0..n_out {
                            gw[i * n_out + o] += xv * g[o];
                            acc += w[i * n_out + o] * g[o];
                        }
                        dxi[i] = acc;
                    }
                    gb.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                    dx.push(Tensor::new(x.shape().to_vec(), dxi)?);
                }
                grads[l] = LayerGrads::Dense {
                    weights: Tensor::new(vec![n_in, n_out], gw)?,
                    bias: Tensor::new(vec![n_out], gb)?,
                };
                dx
            }
            Layer::Relu => xs
                .iter()
                .zip(&dy)
                .map(|(x, g)| {
                    let d = g.data().iter().zip(x.data()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 });
                    Tensor::new(x.shape().to_vec(), d.collect())
                })
                .collect::<Result<Vec<_>>>()?,
            Layer::Tanh => ys
                .iter()
                .zip(&dy)
                .map(|(y, g)| {
                    let d = g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y));
                    Tensor::new(y.shape().to_vec(), d.collect())
                })
                .collect::<Result<Vec<_>>>()?,
            Layer::Pool => xs
                .iter()
                .zip(&dy)
                .map(|(x, g)| {
                    let c = g.len();
                    let positions = (x.len() / c) as f64;
                    let d = (0..x.len()).map(|k| g.data()[k % c] / positions);
                    Tensor::new(x.shape().to_vec(), d.collect())
                })
                .collect::<Result<Vec<_>>>()?,
        };
        dy = dx;
    }
    Ok(grads)
}

/// Plain SGD over every trainable tensor. Routing maps are not touched.
pub fn apply_sgd(model: &mut Model, grads: &[LayerGrads], lr: f64) -> Result<()> {
    for (layer, g) in model.layers.iter_mut().zip(grads) {
        match (layer, g) {
            (
                Layer::Epitome(e),
                LayerGrads::Epitome {
                    epitome, learner, ..
                },
            ) => {
                e.epitome.values_mut().axpy(-lr, epitome)?;
                if let (Some(l), Some(gs)) = (&mut e.learner, learner) {
                    for (p, g) in l.params_mut().into_iter().zip(gs) {
                        p.axpy(-lr, g)?;
                    }
                }
            }
            (Layer::Dense(d), LayerGrads::Dense { weights, bias }) => {
                d.weights.axpy(-lr, weights)?;
                d.bias.axpy(-lr, bias)?;
            }
            _ => {}
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy and per-sample logit gradients (already
/// divided by the batch size).
pub fn softmax_cross_entropy(logits: &[Tensor], labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(NesError::config("logits and labels must be non-empty and aligned"));
    }
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        if y >= z.len() {
            return Err(NesError::OutOfRange {
                index: vec![y],
                shape: vec![z.len()],
            });
        }
        let m = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.data().iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        loss += -((exps[y] / s).ln());
        let g: Vec<f64> = exps
            .iter()
            .enumerate()
            .map(|(k, e)| (e / s - if k == y { 1.0 } else { 0.0 }) / b)
            .collect();
        grads.push(Tensor::new(z.shape().to_vec(), g)?);
    }
    Ok((loss / b, grads))
}

pub fn argmax(t: &Tensor) -> usize {
    t.data()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
