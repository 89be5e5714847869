//! Learner-free inference from a frozen routing map. Input channels are
//! wrapped onto the epitome's channels, multiplied once against every epitome
//! column into a product map, and convolution windows are then read back by
//! summation or from an integral map. Output blocks are assembled from the
//! shared epitome filter channels. Every scalar multiply and add is counted.

use serde::{Deserialize, Serialize};

use crate::epitome::{axis_terms, expand_weights, Epitome, IndexSet, LayerPlan, WrapPolicy};
use crate::error::{NesError, Result};
use crate::routing::RoutingMap;
use crate::tensor::{conv2d_naive_counted, matmul_counted, Tensor};

/// How window sums over the product map are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowStrategy {
    /// Pick whichever of the two costs fewer operations for each group.
    #[default]
    Auto,
    Direct,
    Integral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub strategy: WindowStrategy,
    /// Largest product map, in entries, that may be materialized. Larger
    /// layers convolve the wrapped features with the sampled kernel instead.
    pub product_budget: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            strategy: WindowStrategy::Auto,
            product_budget: 1 << 24,
        }
    }
}

/// Operations executed by each stage of [`infer`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaddBreakdown {
    pub channel_wrap: u64,
    pub product_map: u64,
    pub integral_map: u64,
    pub window_sum: u64,
    pub group_sum: u64,
    pub filter_reuse: u64,
    pub fallback_conv: u64,
}

impl MaddBreakdown {
    pub fn total(&self) -> u64 {
        self.channel_wrap
            + self.product_map
            + self.integral_map
            + self.window_sum
            + self.group_sum
            + self.filter_reuse
            + self.fallback_conv
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaddReport {
    /// Conventional convolution count for the same layer.
    pub naive_madd: u64,
    /// Closed-form reuse count.
    pub reuse_madd: u64,
    /// Operations actually executed.
    pub measured_madd: u64,
    /// `naive_madd / measured_madd`.
    pub ratio: f64,
    pub groups: usize,
    pub used_fallback: bool,
    pub breakdown: MaddBreakdown,
}

impl MaddReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    Naive,
    Reuse,
}

/// Output spatial extent of `plan` applied to an input of `extent`.
pub fn output_extent(plan: &LayerPlan, extent: [usize; 2]) -> Result<[usize; 2]> {
    let (ow, _) = plan.geometry.output_extent(extent[0], plan.weight.w)?;
    let (oh, _) = plan.geometry.output_extent(extent[1], plan.weight.h)?;
    Ok([ow, oh])
}

/// Closed-form operation counts for input spatial extent `extent`, with
/// `W, H` the output extent:
///
/// * naive: `(2 C_in w h - 1) W H C_out`
/// * reuse: `(2 C^E_in W^E H^E - 1) W H C^E_out + W H W^E H^E C^E_out
///   + 2 R_cin W H beta_in + 2 R_cout beta_out`
///
/// A multiply and an add each count as one operation.
pub fn count_madd(plan: &LayerPlan, extent: [usize; 2], mode: CountMode) -> Result<u64> {
    plan.validate()?;
    let [w_out, h_out] = output_extent(plan, extent)?;
    let hw = (w_out * h_out) as u64;
    let (l, e) = (plan.weight, plan.epitome);
    let v = match mode {
        CountMode::Naive => (2 * (l.c_in * l.w * l.h) as u64 - 1) * hw * l.c_out as u64,
        CountMode::Reuse => {
            let area = (e.w * e.h) as u64;
            (2 * e.c_in as u64 * area - 1) * hw * e.c_out as u64
                + hw * area * e.c_out as u64
                + 2 * plan.r_cin() as u64 * hw * plan.beta_in as u64
                + 2 * plan.r_cout() as u64 * plan.beta_out as u64
        }
    };
    Ok(v)
}

/// Slack allowed on top of [`count_madd`] in reuse mode: `4 W H C^E_out`
/// for window retrieval and boundary handling. It bounds [`infer`] for
/// stride-1, same-padded plans with integer starts whose blocks all share
/// one spatial start and whose epitome area is at least `(w h - 4) / 2`;
/// [`reuse_bound`] covers every other plan.
pub fn reuse_overhead(plan: &LayerPlan, extent: [usize; 2]) -> Result<u64> {
    let [w_out, h_out] = output_extent(plan, extent)?;
    Ok(4 * (w_out * h_out * plan.epitome.c_out) as u64)
}

/// Upper bound on the operations [`infer`] executes for this plan, starts
/// and input extent, under any window strategy.
pub fn reuse_bound(plan: &LayerPlan, idx: &IndexSet, extent: [usize; 2]) -> Result<u64> {
    idx.validate(plan)?;
    let [w_out, h_out] = output_extent(plan, extent)?;
    let groups = spatial_groups(plan, idx);
    let e = plan.epitome;
    let in_hw = (extent[0] * extent[1]) as u64;
    let out_hwc = (w_out * h_out * e.c_out) as u64;
    let area = (e.w * e.h) as u64;
    let kernel = (plan.weight.w * plan.weight.h) as u64;
    let g = groups.len() as u64;
    let terms: u64 = groups.iter().map(|gr| gr.terms.len() as u64).sum();
    let wrap = 2 * terms * plan.beta_in as u64 * in_hw;
    let product = (2 * e.c_in as u64 - 1) * in_hw * area * e.c_out as u64;
    let window = (out_hwc * kernel.saturating_sub(1)).max(3 * in_hw * area * e.c_out as u64 + 3 * out_hwc);
    let fallback = (2 * e.c_in as u64 * kernel - 1) * out_hwc;
    let per_group = (product + window).max(fallback);
    let filter = 3 * (w_out * h_out * plan.weight.c_out) as u64;
    Ok(wrap + g * per_group + (g - 1) * out_hwc + filter)
}

#[derive(Debug, Clone, Copy)]
struct WrapTerm {
    block: usize,
    coef: f64,
    start: usize,
}

#[derive(Debug, Clone)]
struct SpatialGroup {
    key: [usize; 2],
    terms: Vec<WrapTerm>,
}

/// Input blocks bucketed by the spatial neighbour starts they read, in order
/// of first appearance.
fn spatial_groups(plan: &LayerPlan, idx: &IndexSet) -> Vec<SpatialGroup> {
    let e = plan.epitome;
    let mut groups: Vec<SpatialGroup> = Vec::new();
    for m in 0..plan.r_cin() {
        let [p, q, c] = plan.input_starts(idx, m);
        let tw = axis_terms(p, e.w, 1);
        let th = axis_terms(q, e.h, 1);
        let tc = axis_terms(c, e.c_in, plan.group_in);
        for kw in 0..tw.count {
            for kh in 0..th.count {
                let key = [tw.idx[kw], th.idx[kh]];
                let pos = match groups.iter().position(|g| g.key == key) {
                    Some(pos) => pos,
                    None => {
                        groups.push(SpatialGroup {
                            key,
                            terms: Vec::new(),
                        });
                        groups.len() - 1
                    }
                };
                for kc in 0..tc.count {
                    groups[pos].terms.push(WrapTerm {
                        block: m,
                        coef: tw.wt[kw] * th.wt[kh] * tc.wt[kc],
                        start: tc.idx[kc],
                    });
                }
            }
        }
    }
    groups
}

fn overrun(axis: &str, end: usize, len: usize) -> NesError {
    NesError::config(format!("{axis} patch element {end} overruns epitome extent {len}"))
}

/// Strict plans may not wrap around any epitome axis.
fn check_strict(plan: &LayerPlan, idx: &IndexSet) -> Result<()> {
    if plan.wrap != WrapPolicy::Strict {
        return Ok(());
    }
    let (e, l) = (plan.epitome, plan.weight);
    for m in 0..plan.r_cin() {
        let [p, q, c] = plan.input_starts(idx, m);
        let used_c = plan.beta_in.min(l.c_in - m * plan.beta_in);
        for (start, len, group, ext, axis) in [
            (p, e.w, 1, l.w, "spatial"),
            (q, e.h, 1, l.h, "spatial"),
            (c, e.c_in, plan.group_in, used_c, "channel"),
        ] {
            let t = axis_terms(start, len, group);
            for k in 0..t.count {
                if t.idx[k] + ext > len {
                    return Err(overrun(axis, t.idx[k] + ext - 1, len));
                }
            }
        }
    }
    for r in 0..plan.r_cout() {
        let used = plan.beta_out.min(l.c_out - r * plan.beta_out);
        let t = axis_terms(plan.filter_start(idx, r), e.c_out, plan.group_out);
        for k in 0..t.count {
            if t.idx[k] + used > e.c_out {
                return Err(overrun("filter", t.idx[k] + used - 1, e.c_out));
            }
        }
    }
    Ok(())
}

fn wrap_terms(f: &Tensor, plan: &LayerPlan, terms: &[WrapTerm], ops: &mut u64) -> Tensor {
    let (w, h, c_in) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let ce = plan.epitome.c_in;
    let mut out = vec![0.0; w * h * ce];
    let mut filled = vec![false; ce];
    let src = f.data();
    for pos in 0..w * h {
        filled.iter_mut().for_each(|v| *v = false);
        let row = &src[pos * c_in..(pos + 1) * c_in];
        let dst = &mut out[pos * ce..(pos + 1) * ce];
        for t in terms {
            for a in 0..plan.beta_in {
                let ch = t.block * plan.beta_in + a;
                if ch >= c_in {
                    break;
                }
                let k = (t.start + a) % ce;
                let mut v = row[ch];
                if t.coef != 1.0 {
                    v *= t.coef;
                    *ops += 1;
                }
                if filled[k] {
                    dst[k] += v;
                    *ops += 1;
                } else {
                    dst[k] = v;
                    filled[k] = true;
                }
            }
        }
    }
    Tensor::new(vec![w, h, ce], out).expect("wrapped extents are consistent")
}

/// Channel-wrapped features `F~[x, y, k] = sum over blocks and channel
/// neighbours of coef * F[x, y, channel]` where the channel lands on epitome
/// channel `k`. Spatial starts are ignored here.
pub fn channel_wrap(f: &Tensor, map: &RoutingMap, plan: &LayerPlan) -> Result<Tensor> {
    map.require_frozen()?;
    map.matches(plan)?;
    let f3 = as_3d(f, plan)?;
    let idx = map.indices();
    check_strict(plan, &idx)?;
    let mut terms = Vec::new();
    for m in 0..plan.r_cin() {
        let c = plan.input_starts(&idx, m)[2];
        let t = axis_terms(c, plan.epitome.c_in, plan.group_in);
        for k in 0..t.count {
            terms.push(WrapTerm {
                block: m,
                coef: t.wt[k],
                start: t.idx[k],
            });
        }
    }
    let mut ops = 0;
    let out = wrap_terms(&f3, plan, &terms, &mut ops);
    let mut shape = f.shape().to_vec();
    *shape.last_mut().unwrap() = plan.epitome.c_in;
    out.reshape(&shape)
}

/// `P[x, y, p, q, n] = F~[x, y, :] . E[p, q, :, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductMap {
    values: Tensor,
}

impl ProductMap {
    /// Builds the map and returns it with the operations spent,
    /// `(2 C^E_in - 1)` per entry.
    pub fn build(wrapped: &Tensor, e: &Epitome) -> Result<(Self, u64)> {
        let s = e.shape();
        if wrapped.rank() != 3 || wrapped.shape()[2] != s.c_in {
            return Err(NesError::DimensionMismatch {
                op: "product map",
                left: wrapped.shape().to_vec(),
                right: s.as_array().to_vec(),
            });
        }
        let (w, h) = (wrapped.shape()[0], wrapped.shape()[1]);
        let (ce, co) = (s.c_in, s.c_out);
        let ev = e.values().data();
        let fv = wrapped.data();
        let mut out = Vec::with_capacity(w * h * s.w * s.h * co);
        for pos in 0..w * h {
            let f = &fv[pos * ce..(pos + 1) * ce];
            for pq in 0..s.w * s.h {
                let base = pq * ce * co;
                for n in 0..co {
                    let mut acc = f[0] * ev[base + n];
                    for k in 1..ce {
                        acc += f[k] * ev[base + k * co + n];
                    }
                    out.push(acc);
                }
            }
        }
        let ops = (w * h * s.w * s.h * co * (2 * ce - 1)) as u64;
        Ok((
            ProductMap {
                values: Tensor::new(vec![w, h, s.w, s.h, co], out)?,
            },
            ops,
        ))
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    fn dims(&self) -> [usize; 5] {
        self.values.shape().try_into().expect("rank 5")
    }

    #[inline]
    fn at(&self, x: usize, y: usize, p: usize, q: usize, n: usize) -> f64 {
        let [_, h, we, he, co] = self.dims();
        self.values.data()[(((x * h + y) * we + p) * he + q) * co + n]
    }
}

pub fn build_product_map(wrapped: &Tensor, e: &Epitome) -> Result<ProductMap> {
    ProductMap::build(wrapped, e).map(|(p, _)| p)
}

/// Wrapped diagonal summed-area table over a [`ProductMap`]:
/// `I[x, y, p, q, n] = sum_{a <= x, b <= y} P[x-a, y-b, (p-a) mod W^E, (q-b) mod H^E, n]`,
/// built with
/// `I = P + I[x-1, y, p-1, q] + I[x, y-1, p, q-1] - I[x-1, y-1, p-1, q-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralMap {
    values: Tensor,
}

impl IntegralMap {
    pub fn build(p: &ProductMap) -> (Self, u64) {
        let [w, h, we, he, co] = p.dims();
        let mut v = p.values.data().to_vec();
        let off = |x: usize, y: usize, pp: usize, q: usize| (((x * h + y) * we + pp) * he + q) * co;
        let mut ops = 0u64;
        for x in 0..w {
            for y in 0..h {
                for pp in 0..we {
                    for q in 0..he {
                        let here = off(x, y, pp, q);
                        let pm = (pp + we - 1) % we;
                        let qm = (q + he - 1) % he;
                        for n in 0..co {
                            let mut acc = v[here + n];
                            if x > 0 {
                                acc += v[off(x - 1, y, pm, q) + n];
                                ops += 1;
                            }
                            if y > 0 {
                                acc += v[off(x, y - 1, pp, qm) + n];
                                ops += 1;
                            }
                            if x > 0 && y > 0 {
                                acc -= v[off(x - 1, y - 1, pm, qm) + n];
                                ops += 1;
                            }
                            v[here + n] = acc;
                        }
                    }
                }
            }
        }
        let values = Tensor::new(vec![w, h, we, he, co], v).expect("same extents as product map");
        (IntegralMap { values }, ops)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    #[inline]
    fn at(&self, x: usize, y: usize, p: usize, q: usize, n: usize) -> f64 {
        let s = self.values.shape();
        self.values.data()[(((x * s[1] + y) * s[2] + p) * s[3] + q) * s[4] + n]
    }

    /// `sum_{i < w, j < h} P[x0+i, y0+j, (p0+i) mod W^E, (q0+j) mod H^E, n]`
    /// and the operations spent (at most 3).
    #[allow(clippy::too_many_arguments)]
    pub fn retrieve_counted(
        &self,
        x0: usize,
        y0: usize,
        p0: usize,
        q0: usize,
        n: usize,
        w: usize,
        h: usize,
    ) -> Result<(f64, u64)> {
        let s = self.values.shape();
        if w == 0 || h == 0 || x0 + w > s[0] || y0 + h > s[1] || p0 >= s[2] || q0 >= s[3] || n >= s[4] {
            return Err(NesError::OutOfRange {
                index: vec![x0, y0, p0, q0, n, w, h],
                shape: s.to_vec(),
            });
        }
        let (we, he) = (s[2], s[3]);
        let (x1, y1) = (x0 + w - 1, y0 + h - 1);
        let p1 = (p0 + w - 1) % we;
        let q1 = (q0 + h - 1) % he;
        let pb = (p1 + we - w % we) % we;
        let qb = (q1 + he - h % he) % he;
        let mut v = self.at(x1, y1, p1, q1, n);
        let mut ops = 0;
        if x0 > 0 {
            v -= self.at(x0 - 1, y1, pb, q1, n);
            ops += 1;
        }
        if y0 > 0 {
            v -= self.at(x1, y0 - 1, p1, qb, n);
            ops += 1;
        }
        if x0 > 0 && y0 > 0 {
            v += self.at(x0 - 1, y0 - 1, pb, qb, n);
            ops += 1;
        }
        Ok((v, ops))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn retrieve(&self, x0: usize, y0: usize, p0: usize, q0: usize, n: usize, w: usize, h: usize) -> Result<f64> {
        self.retrieve_counted(x0, y0, p0, q0, n, w, h).map(|(v, _)| v)
    }
}

pub fn build_integral_map(p: &ProductMap) -> IntegralMap {
    IntegralMap::build(p).0
}

/// Clipped window of one output coordinate along one axis.
#[derive(Debug, Clone, Copy)]
struct Window {
    /// First in-bounds input coordinate.
    x0: usize,
    /// Kernel offset of `x0`.
    i0: usize,
    len: usize,
}

fn windows(input: usize, output: usize, kernel: usize, stride: usize, pad: usize) -> Vec<Window> {
    (0..output)
        .map(|t| {
            let start = (t * stride) as isize - pad as isize;
            let lo = start.max(0);
            let hi = (start + kernel as isize).min(input as isize);
            let len = (hi - lo).max(0) as usize;
            Window {
                x0: lo as usize,
                i0: (lo - start) as usize,
                len,
            }
        })
        .collect()
}

fn window_direct_cost(ws: &[Window], hs: &[Window], co: usize) -> u64 {
    let mut c = 0u64;
    for a in ws {
        for b in hs {
            c += (a.len * b.len).saturating_sub(1) as u64;
        }
    }
    c * co as u64
}

fn window_integral_cost(input: [usize; 2], area: usize, ws: &[Window], hs: &[Window], co: usize) -> u64 {
    let [w, h] = input;
    let build = (3 * (w - 1) * (h - 1) + (w - 1) + (h - 1)) * area * co;
    let mut retrieve = 0usize;
    for a in ws {
        for b in hs {
            if a.len > 0 && b.len > 0 {
                retrieve += (a.x0 > 0) as usize + (b.x0 > 0) as usize + (a.x0 > 0 && b.x0 > 0) as usize;
            }
        }
    }
    (build + retrieve * co) as u64
}

fn as_3d(f: &Tensor, plan: &LayerPlan) -> Result<Tensor> {
    let c_in = plan.weight.c_in;
    let s = f.shape();
    let ok = match s.len() {
        1 => plan.weight.w == 1 && plan.weight.h == 1,
        2 => plan.weight.h == 1,
        3 => true,
        _ => false,
    };
    if !ok || s.last() != Some(&c_in) {
        return Err(NesError::DimensionMismatch {
            op: "features vs plan",
            left: s.to_vec(),
            right: plan.weight.as_array().to_vec(),
        });
    }
    let shape = match s.len() {
        1 => vec![1, 1, c_in],
        2 => vec![s[0], 1, c_in],
        _ => s.to_vec(),
    };
    f.clone().reshape(&shape)
}

fn restore_rank(out: Tensor, rank: usize) -> Result<Tensor> {
    let s = out.shape().to_vec();
    match rank {
        1 => out.reshape(&[s[2]]),
        2 => out.reshape(&[s[0], s[2]]),
        _ => Ok(out),
    }
}

/// Reference path: expand the logical weights and convolve directly.
/// Returns the output and the conventional operation count. Rank-1 inputs
/// are treated as a fully-connected layer, rank-2 as a 1-D convolution.
pub fn naive_forward(f: &Tensor, e: &Epitome, idx: &IndexSet, plan: &LayerPlan) -> Result<(Tensor, u64)> {
    let f3 = as_3d(f, plan)?;
    let w = expand_weights(e, plan, idx)?;
    if f.rank() == 1 {
        let (l, r) = (plan.weight.c_in, plan.weight.c_out);
        return matmul_counted(f, &w.reshape(&[l, r])?);
    }
    let (out, ops) = conv2d_naive_counted(&f3, &w, plan.geometry)?;
    Ok((restore_rank(out, f.rank())?, ops))
}

/// Fast inference with default options.
pub fn infer(f: &Tensor, e: &Epitome, map: &RoutingMap, plan: &LayerPlan) -> Result<(Tensor, MaddReport)> {
    infer_with(f, e, map, plan, InferOptions::default())
}

pub fn infer_with(
    f: &Tensor,
    e: &Epitome,
    map: &RoutingMap,
    plan: &LayerPlan,
    opts: InferOptions,
) -> Result<(Tensor, MaddReport)> {
    map.require_frozen()?;
    map.matches(plan)?;
    if e.shape() != plan.epitome {
        return Err(NesError::DimensionMismatch {
            op: "epitome vs plan",
            left: e.shape().as_array().to_vec(),
            right: plan.epitome.as_array().to_vec(),
        });
    }
    let idx = map.indices();
    check_strict(plan, &idx)?;
    let f3 = as_3d(f, plan)?;
    let (iw, ih) = (f3.shape()[0], f3.shape()[1]);
    let (ow, pw) = plan.geometry.output_extent(iw, plan.weight.w)?;
    let (oh, ph) = plan.geometry.output_extent(ih, plan.weight.h)?;
    let es = plan.epitome;
    let co = es.c_out;
    let ws = windows(iw, ow, plan.weight.w, plan.geometry.stride, pw);
    let hs = windows(ih, oh, plan.weight.h, plan.geometry.stride, ph);

    let groups = spatial_groups(plan, &idx);
    let mut bd = MaddBreakdown::default();
    let fallback = iw * ih * es.w * es.h * co > opts.product_budget;
    let mut summed: Option<Vec<f64>> = None;
    for g in &groups {
        let wrapped = wrap_terms(&f3, plan, &g.terms, &mut bd.channel_wrap);
        let s = if fallback {
            let kernel = Tensor::from_fn(&[plan.weight.w, plan.weight.h, es.c_in, co], |ix| {
                e.values().data()[(((ix[0] + g.key[0]) % es.w * es.h + (ix[1] + g.key[1]) % es.h) * es.c_in
                    + ix[2])
                    * co
                    + ix[3]]
            });
            let (out, ops) = conv2d_naive_counted(&wrapped, &kernel, plan.geometry)?;
            bd.fallback_conv += ops;
            out.into_data()
        } else {
            let (pm, ops) = ProductMap::build(&wrapped, e)?;
            bd.product_map += ops;
            let use_integral = match opts.strategy {
                WindowStrategy::Direct => false,
                WindowStrategy::Integral => true,
                WindowStrategy::Auto => {
                    window_integral_cost([iw, ih], es.w * es.h, &ws, &hs, co) < window_direct_cost(&ws, &hs, co)
                }
            };
            let mut out = vec![0.0; ow * oh * co];
            if use_integral {
                let (im, ops) = IntegralMap::build(&pm);
                bd.integral_map += ops;
                for (tw, a) in ws.iter().enumerate() {
                    for (th, b) in hs.iter().enumerate() {
                        if a.len == 0 || b.len == 0 {
                            continue;
                        }
                        let p0 = (g.key[0] + a.i0) % es.w;
                        let q0 = (g.key[1] + b.i0) % es.h;
                        for n in 0..co {
                            let (v, ops) = im.retrieve_counted(a.x0, b.x0, p0, q0, n, a.len, b.len)?;
                            bd.window_sum += ops;
                            out[(tw * oh + th) * co + n] = v;
                        }
                    }
                }
            } else {
                for (tw, a) in ws.iter().enumerate() {
                    for (th, b) in hs.iter().enumerate() {
                        for n in 0..co {
                            let mut acc = 0.0;
                            let mut first = true;
                            for i in 0..a.len {
                                let p = (g.key[0] + a.i0 + i) % es.w;
                                for j in 0..b.len {
                                    let q = (g.key[1] + b.i0 + j) % es.h;
                                    let v = pm.at(a.x0 + i, b.x0 + j, p, q, n);
                                    if first {
                                        acc = v;
                                        first = false;
                                    } else {
                                        acc += v;
                                        bd.window_sum += 1;
                                    }
                                }
                            }
                            out[(tw * oh + th) * co + n] = acc;
                        }
                    }
                }
            }
            out
        };
        match &mut summed {
            None => summed = Some(s),
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(&s) {
                    *a += v;
                }
                bd.group_sum += s.len() as u64;
            }
        }
    }
    let full = summed.unwrap_or_else(|| vec![0.0; ow * oh * co]);

    let c_out = plan.weight.c_out;
    let mut out = vec![0.0; ow * oh * c_out];
    let mut seen: Vec<(u64, usize)> = Vec::new();
    for r in 0..plan.r_cout() {
        let base = r * plan.beta_out;
        let used = plan.beta_out.min(c_out - base);
        let start = plan.filter_start(&idx, r);
        if let Some(&(_, prev)) = seen.iter().find(|(bits, _)| *bits == start.to_bits()) {
            let pb = prev * plan.beta_out;
            for t in 0..ow * oh {
                for b in 0..used {
                    out[t * c_out + base + b] = out[t * c_out + pb + b];
                }
            }
            continue;
        }
        seen.push((start.to_bits(), r));
        let terms = axis_terms(start, co, plan.group_out);
        let copy = terms.count == 1 && terms.wt[0] == 1.0;
        for t in 0..ow * oh {
            let src = &full[t * co..(t + 1) * co];
            for b in 0..used {
                let v = if copy {
                    src[(terms.idx[0] + b) % co]
                } else {
                    let mut acc = terms.wt[0] * src[(terms.idx[0] + b) % co];
                    bd.filter_reuse += 1;
                    for k in 1..terms.count {
                        acc += terms.wt[k] * src[(terms.idx[k] + b) % co];
                        bd.filter_reuse += 2;
                    }
                    acc
                };
                out[t * c_out + base + b] = v;
            }
        }
    }
    let g = Tensor::new(vec![ow, oh, c_out], out)?;
    let naive_madd = count_madd(plan, [iw, ih], CountMode::Naive)?;
    let reuse_madd = count_madd(plan, [iw, ih], CountMode::Reuse)?;
    let measured = bd.total();
    let report = MaddReport {
        naive_madd,
        reuse_madd,
        measured_madd: measured,
        ratio: naive_madd as f64 / measured.max(1) as f64,
        groups: groups.len(),
        used_fallback: fallback,
        breakdown: bd,
    };
    Ok((restore_rank(g, f.rank())?, report))
}
