//! Parameter and operation accounting for whole architectures described in
//! TOML, and epitome planning from a width-multiplier style budget.

use serde::{Deserialize, Serialize};

use crate::epitome::{LayerPlan, Shape4};
use crate::error::{NesError, Result};
use crate::infer::{count_madd, CountMode};
use crate::tensor::{ConvGeometry, Padding};

pub const MOBILENETV2_TOML: &str = include_str!("../assets/mobilenetv2.toml");
pub const CNN1D_TOML: &str = include_str!("../assets/cnn1d.toml");

fn one() -> usize {
    1
}

/// One entry of an architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerConfig {
    Conv2d {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        out: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epitome: Option<[usize; 4]>,
        #[serde(default)]
        bias: bool,
    },
    Conv1d {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        out: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epitome: Option<[usize; 4]>,
        #[serde(default)]
        bias: bool,
    },
    Depthwise {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    /// Inverted residual blocks: 1x1 expansion (omitted when `expansion` is
    /// 1), 3x3 depthwise, 1x1 projection. Only the first repeat is strided.
    Bottleneck {
        expansion: usize,
        out: usize,
        #[serde(default = "one")]
        repeat: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    /// Global average pooling to a 1x1 extent.
    Pool,
    Fc {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        out: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epitome: Option<[usize; 4]>,
        #[serde(default = "default_true")]
        bias: bool,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: String,
    /// `[W, H, C]` of the network input (`H = 1` for 1-D signals).
    pub input: [usize; 3],
    #[serde(rename = "layer", default)]
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Conv1d,
    Depthwise,
    Fc,
}

/// A parameterized layer with its concrete extents.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedLayer {
    pub name: String,
    pub kind: LayerKind,
    /// Logical weight shape; depthwise layers use `[w, h, 1, C]`.
    pub weight: Shape4,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub epitome: Option<Shape4>,
    pub bias: bool,
}

impl ResolvedLayer {
    pub fn plan(&self) -> Result<Option<LayerPlan>> {
        match self.epitome {
            None => Ok(None),
            Some(e) => Ok(Some(
                LayerPlan::new(self.weight, e)?.with_geometry(ConvGeometry::new(self.stride, Padding::Same)),
            )),
        }
    }

    pub fn baseline_params(&self) -> usize {
        self.weight.numel() + if self.bias { self.weight.c_out } else { 0 }
    }

    /// Stored numbers: epitome plus routing map for compressed layers.
    pub fn params(&self) -> Result<usize> {
        let bias = if self.bias { self.weight.c_out } else { 0 };
        Ok(bias
            + match self.plan()? {
                Some(p) => p.stored_numbers(),
                None => self.weight.numel(),
            })
    }
}

fn parse_err(e: toml::de::Error) -> NesError {
    let offset = e.span().map(|s| s.start).unwrap_or(0);
    NesError::parse(offset, e.message().to_string())
}

impl ArchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ArchConfig = toml::from_str(text).map_err(parse_err)?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| NesError::config(e.to_string()))
    }

    /// A bundled architecture: `mobilenetv2` or `cnn1d`.
    pub fn bundled(name: &str) -> Result<Self> {
        match name {
            "mobilenetv2" => Self::from_toml(MOBILENETV2_TOML),
            "cnn1d" => Self::from_toml(CNN1D_TOML),
            other => Err(NesError::config(format!("no bundled architecture named {other:?}"))),
        }
    }

    /// Bottlenecks replaced by their primitive layers, names filled in.
    pub fn flatten(&self) -> Vec<LayerConfig> {
        let mut out = Vec::new();
        let mut c = self.input[2];
        let mut block = 0;
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerConfig::Bottleneck {
                    expansion,
                    out: k_out,
                    repeat,
                    stride,
                } => {
                    for rep in 0..*repeat {
                        let hidden = expansion * c;
                        let s = if rep == 0 { *stride } else { 1 };
                        if *expansion != 1 {
                            out.push(LayerConfig::Conv2d {
                                name: Some(format!("block{block}.expand")),
                                out: hidden,
                                kernel: 1,
                                stride: 1,
                                epitome: None,
                                bias: false,
                            });
                        }
                        out.push(LayerConfig::Depthwise {
                            name: Some(format!("block{block}.depthwise")),
                            kernel: 3,
                            stride: s,
                        });
                        out.push(LayerConfig::Conv2d {
                            name: Some(format!("block{block}.project")),
                            out: *k_out,
                            kernel: 1,
                            stride: 1,
                            epitome: None,
                            bias: false,
                        });
                        c = *k_out;
                        block += 1;
                    }
                }
                other => {
                    let mut l = other.clone();
                    match &mut l {
                        LayerConfig::Conv2d { name, out, .. }
                        | LayerConfig::Conv1d { name, out, .. }
                        | LayerConfig::Fc { name, out, .. } => {
                            name.get_or_insert_with(|| format!("layer{i}"));
                            c = *out;
                        }
                        LayerConfig::Depthwise { name, .. } => {
                            name.get_or_insert_with(|| format!("layer{i}"));
                        }
                        _ => {}
                    }
                    out.push(l);
                }
            }
        }
        out
    }

    /// Concrete parameterized layers with their input and output extents.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        if self.input.contains(&0) {
            return Err(NesError::config("input extents must be >= 1"));
        }
        let [mut w, mut h, mut c] = self.input;
        let mut out = Vec::new();
        for l in self.flatten() {
            let same = |x: usize, s: usize| -> Result<usize> {
                if s == 0 {
                    return Err(NesError::config("stride must be >= 1"));
                }
                Ok(x.div_ceil(s))
            };
            let layer = match l {
                LayerConfig::Conv2d {
                    name,
                    out: k,
                    kernel,
                    stride,
                    epitome,
                    bias,
                } => {
                    let (ow, oh) = (same(w, stride)?, same(h, stride)?);
                    ResolvedLayer {
                        name: name.unwrap_or_default(),
                        kind: LayerKind::Conv2d,
                        weight: Shape4::new(kernel, kernel, c, k),
                        input: [w, h, c],
                        output: [ow, oh, k],
                        stride,
                        epitome: epitome.map(Shape4::from),
                        bias,
                    }
                }
                LayerConfig::Conv1d {
                    name,
                    out: k,
                    kernel,
                    stride,
                    epitome,
                    bias,
                } => {
                    if h != 1 {
                        return Err(NesError::config("conv1d layers need a 1-D input (H = 1)"));
                    }
                    let ow = same(w, stride)?;
                    ResolvedLayer {
                        name: name.unwrap_or_default(),
                        kind: LayerKind::Conv1d,
                        weight: Shape4::new(kernel, 1, c, k),
                        input: [w, 1, c],
                        output: [ow, 1, k],
                        stride,
                        epitome: epitome.map(Shape4::from),
                        bias,
                    }
                }
                LayerConfig::Depthwise { name, kernel, stride } => {
                    let kh = if h == 1 { 1 } else { kernel };
                    let (ow, oh) = (same(w, stride)?, same(h, stride)?);
                    ResolvedLayer {
                        name: name.unwrap_or_default(),
                        kind: LayerKind::Depthwise,
                        weight: Shape4::new(kernel, kh, 1, c),
                        input: [w, h, c],
                        output: [ow, oh, c],
                        stride,
                        epitome: None,
                        bias: false,
                    }
                }
                LayerConfig::Fc {
                    name,
                    out: k,
                    epitome,
                    bias,
                } => {
                    let n_in = w * h * c;
                    ResolvedLayer {
                        name: name.unwrap_or_default(),
                        kind: LayerKind::Fc,
                        weight: Shape4::new(1, 1, n_in, k),
                        input: [1, 1, n_in],
                        output: [1, 1, k],
                        stride: 1,
                        epitome: epitome.map(Shape4::from),
                        bias,
                    }
                }
                LayerConfig::Pool => {
                    w = 1;
                    h = 1;
                    continue;
                }
                LayerConfig::Bottleneck { .. } => unreachable!("flatten removes bottlenecks"),
            };
            if layer.weight.as_array().contains(&0) {
                return Err(NesError::config(format!("layer {} has a zero extent", layer.name)));
            }
            if let Some(e) = layer.epitome {
                if layer.kind == LayerKind::Fc && (e.w != 1 || e.h != 1) {
                    return Err(NesError::config(format!("fc epitome of {} must be 1x1", layer.name)));
                }
                layer.plan()?;
            }
            [w, h, c] = layer.output;
            out.push(layer);
        }
        Ok(out)
    }
}

/// `w h C_in C_out / (W^E H^E C^E_in C^E_out + 3 R_cin + R_cout)`.
pub fn layer_param_ratio(layer: &ResolvedLayer) -> Result<f64> {
    let plan = layer
        .plan()?
        .ok_or_else(|| NesError::config(format!("layer {} carries no epitome", layer.name)))?;
    Ok(layer.weight.numel() as f64 / plan.stored_numbers() as f64)
}

/// Counts for one layer under three conventions: fused multiply-adds (one
/// per multiply-accumulate), separate multiplies and adds with the `-1` of
/// each dot product kept, and separate counts without it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub compressed: bool,
    pub baseline_params: usize,
    pub params: usize,
    pub baseline_madd: u64,
    pub madd: u64,
    pub baseline_ops: u64,
    pub ops: u64,
    pub baseline_ops_no_minus_one: u64,
    pub ops_no_minus_one: u64,
    pub param_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub name: String,
    pub layers: Vec<LayerCost>,
    pub baseline_params: usize,
    pub params: usize,
    pub baseline_madd: u64,
    pub madd: u64,
    pub baseline_ops: u64,
    pub ops: u64,
    pub baseline_ops_no_minus_one: u64,
    pub ops_no_minus_one: u64,
    pub param_rate: f64,
    pub madd_rate: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        1.0
    } else {
        a / b
    }
}

pub fn layer_cost(layer: &ResolvedLayer) -> Result<LayerCost> {
    let [ow, oh, _] = layer.output;
    let hw = (ow * oh) as u64;
    let k = (layer.weight.w * layer.weight.h * layer.weight.c_in) as u64;
    let c_out = layer.weight.c_out as u64;
    let baseline_madd = hw * c_out * k;
    let baseline_ops = hw * c_out * (2 * k - 1);
    let baseline_ops_nm = hw * c_out * 2 * k;
    let (params, madd, ops, ops_nm) = match layer.plan()? {
        None => (layer.baseline_params(), baseline_madd, baseline_ops, baseline_ops_nm),
        Some(plan) => {
            let e = plan.epitome;
            let extent = [layer.input[0], layer.input[1]];
            let ops = count_madd(&plan, extent, CountMode::Reuse)?;
            let madd = hw * (e.c_out * e.c_in * e.w * e.h) as u64;
            (layer.params()?, madd, ops, ops + hw * e.c_out as u64)
        }
    };
    Ok(LayerCost {
        name: layer.name.clone(),
        kind: layer.kind,
        compressed: layer.epitome.is_some(),
        baseline_params: layer.baseline_params(),
        params,
        baseline_madd,
        madd,
        baseline_ops,
        ops,
        baseline_ops_no_minus_one: baseline_ops_nm,
        ops_no_minus_one: ops_nm,
        param_ratio: ratio(layer.baseline_params() as f64, params as f64),
    })
}

/// Per-layer and total counts. Batch normalization is assumed folded.
pub fn network_counts(cfg: &ArchConfig) -> Result<CostReport> {
    let layers = cfg.resolve()?.iter().map(layer_cost).collect::<Result<Vec<_>>>()?;
    let mut r = CostReport {
        name: cfg.name.clone(),
        baseline_params: layers.iter().map(|l| l.baseline_params).sum(),
        params: layers.iter().map(|l| l.params).sum(),
        baseline_madd: layers.iter().map(|l| l.baseline_madd).sum(),
        madd: layers.iter().map(|l| l.madd).sum(),
        baseline_ops: layers.iter().map(|l| l.baseline_ops).sum(),
        ops: layers.iter().map(|l| l.ops).sum(),
        baseline_ops_no_minus_one: layers.iter().map(|l| l.baseline_ops_no_minus_one).sum(),
        ops_no_minus_one: layers.iter().map(|l| l.ops_no_minus_one).sum(),
        param_rate: 1.0,
        madd_rate: 1.0,
        layers,
    };
    r.param_rate = ratio(r.baseline_params as f64, r.params as f64);
    r.madd_rate = ratio(r.baseline_madd as f64, r.madd as f64);
    Ok(r)
}

/// Total baseline parameters over total stored numbers.
pub fn network_ratio(cfg: &ArchConfig) -> Result<f64> {
    Ok(network_counts(cfg)?.param_rate)
}

/// Epitome dimensions for every expanding bottleneck at multiplier `c`:
/// the expansion conv `(1, 1, k, t k)` gets `(1, 1, k, c t k)` and the
/// projection `(1, 1, t k, k')` gets `(1, 1, c t k, k')`. Depthwise layers
/// and `t = 1` blocks are left alone. Channel counts are rounded to the
/// nearest integer (at least 1); each rounding is reported in the notes.
pub fn plan_from_multiplier(cfg: &ArchConfig, c: f64) -> Result<(ArchConfig, Vec<String>)> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(NesError::config(format!("multiplier {c} outside (0, 1]")));
    }
    let mut notes = Vec::new();
    let mut layers = Vec::new();
    let mut ch = cfg.input[2];
    for l in &cfg.layers {
        match l {
            LayerConfig::Bottleneck {
                expansion,
                out,
                repeat,
                stride,
            } => {
                for rep in 0..*repeat {
                    let one = ArchConfig {
                        name: String::new(),
                        input: [1, 1, ch],
                        layers: vec![LayerConfig::Bottleneck {
                            expansion: *expansion,
                            out: *out,
                            repeat: 1,
                            stride: if rep == 0 { *stride } else { 1 },
                        }],
                    };
                    let block = layers
                        .iter()
                        .filter(|l| matches!(l, LayerConfig::Depthwise { .. }))
                        .count();
                    let exact = c * (*expansion * ch) as f64;
                    let inner = (exact.round() as usize).max(1);
                    if *expansion != 1 && (exact - inner as f64).abs() > 1e-9 {
                        notes.push(format!("block{block}: c t k = {exact} rounded to {inner}"));
                    }
                    for mut p in one.flatten() {
                        if let LayerConfig::Conv2d { name, epitome, .. } = &mut p {
                            *name = name.as_ref().map(|n| n.replace("block0", &format!("block{block}")));
                            if *expansion != 1 {
                                *epitome = Some(if name.as_deref().is_some_and(|n| n.ends_with("expand")) {
                                    [1, 1, ch, inner]
                                } else {
                                    [1, 1, inner, *out]
                                });
                            }
                        }
                        if let LayerConfig::Depthwise { name, .. } = &mut p {
                            *name = Some(format!("block{block}.depthwise"));
                        }
                        layers.push(p);
                    }
                    ch = *out;
                }
            }
            LayerConfig::Conv2d { out, .. } | LayerConfig::Conv1d { out, .. } | LayerConfig::Fc { out, .. } => {
                ch = *out;
                layers.push(l.clone());
            }
            other => layers.push(other.clone()),
        }
    }
    let planned = ArchConfig {
        name: format!("{}-epitome-{c}", cfg.name),
        input: cfg.input,
        layers,
    };
    planned.resolve()?;
    Ok((planned, notes))
}

/// CSV with one row per layer and a final `total` row.
pub fn report_csv(report: &CostReport) -> Result<String> {
    #[derive(Serialize)]
    struct Row<'a> {
        name: &'a str,
        kind: &'a str,
        compressed: bool,
        baseline_params: usize,
        params: usize,
        baseline_madd: u64,
        madd: u64,
        baseline_ops: u64,
        ops: u64,
        baseline_ops_no_minus_one: u64,
        ops_no_minus_one: u64,
        param_ratio: f64,
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let kind_name = |k: LayerKind| match k {
        LayerKind::Conv2d => "conv2d",
        LayerKind::Conv1d => "conv1d",
        LayerKind::Depthwise => "depthwise",
        LayerKind::Fc => "fc",
    };
    let io = |e: csv::Error| NesError::Io(e.to_string());
    for l in &report.layers {
        w.serialize(Row {
            name: &l.name,
            kind: kind_name(l.kind),
            compressed: l.compressed,
            baseline_params: l.baseline_params,
            params: l.params,
            baseline_madd: l.baseline_madd,
            madd: l.madd,
            baseline_ops: l.baseline_ops,
            ops: l.ops,
            baseline_ops_no_minus_one: l.baseline_ops_no_minus_one,
            ops_no_minus_one: l.ops_no_minus_one,
            param_ratio: l.param_ratio,
        })
        .map_err(io)?;
    }
    w.serialize(Row {
        name: "total",
        kind: "",
        compressed: report.params != report.baseline_params,
        baseline_params: report.baseline_params,
        params: report.params,
        baseline_madd: report.baseline_madd,
        madd: report.madd,
        baseline_ops: report.baseline_ops,
        ops: report.ops,
        baseline_ops_no_minus_one: report.baseline_ops_no_minus_one,
        ops_no_minus_one: report.ops_no_minus_one,
        param_ratio: report.param_rate,
    })
    .map_err(io)?;
    let bytes = w.into_inner().map_err(|e| NesError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| NesError::Io(e.to_string()))
}
