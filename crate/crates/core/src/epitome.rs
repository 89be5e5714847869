//! Epitomes and the interpolation sampler that expands them into full
//! convolution or fully-connected weights.
//!
//! A weight tensor `[w, h, C_in, C_out]` is tiled into `R_cout` filter blocks
//! (outer) by `R_cin` input-channel blocks (inner). Input block `m` owns a
//! start triple `(p, q, c_in)`, filter block `r` owns a start `c_out`. Every
//! start may be fractional: the block is the triangular-kernel blend of the
//! (at most two) neighbouring integer-start patches on each axis, and patch
//! elements that run past an epitome edge wrap around.

use serde::{Deserialize, Serialize};

use crate::error::{NesError, Result};
use crate::tensor::{ConvGeometry, Rng, Tensor};

/// Extents of a weight-shaped 4-D tensor: `(w, h, c_in, c_out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub w: usize,
    pub h: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Shape4 {
    pub const fn new(w: usize, h: usize, c_in: usize, c_out: usize) -> Self {
        Shape4 { w, h, c_in, c_out }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.w, self.h, self.c_in, self.c_out]
    }

    pub fn numel(&self) -> usize {
        self.w * self.h * self.c_in * self.c_out
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(a: [usize; 4]) -> Self {
        Shape4::new(a[0], a[1], a[2], a[3])
    }
}

/// The compressed parameter store of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Epitome {
    values: Tensor,
}

impl Epitome {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 || values.shape().contains(&0) {
            return Err(NesError::config(format!(
                "epitome must be 4-D with positive extents, got {:?}",
                values.shape()
            )));
        }
        Ok(Epitome { values })
    }

    pub fn zeros(shape: Shape4) -> Result<Self> {
        Self::new(Tensor::zeros(&shape.as_array()))
    }

    pub fn random(shape: Shape4, std: f64, rng: &mut Rng) -> Result<Self> {
        Self::new(Tensor::randn(&shape.as_array(), std, rng))
    }

    pub fn shape(&self) -> Shape4 {
        let s = self.values.shape();
        Shape4::new(s[0], s[1], s[2], s[3])
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Patch selected from an epitome: fractional start plus integer extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubTensorSpec {
    pub start: [f64; 4],
    pub extent: [usize; 4],
}

impl SubTensorSpec {
    pub fn validate(&self, epitome: Shape4) -> Result<()> {
        let dims = epitome.as_array();
        for (axis, (&s, &len)) in self.start.iter().zip(&dims).enumerate() {
            if !(s.is_finite() && s >= 0.0 && s < len as f64) {
                return Err(NesError::config(format!(
                    "start {s} on axis {axis} outside [0, {len})"
                )));
            }
            if self.extent[axis] == 0 {
                return Err(NesError::config("sub-tensor extents must be positive"));
            }
        }
        if self.extent[2] > epitome.c_in || self.extent[3] > epitome.c_out {
            return Err(NesError::config(format!(
                "channel extents {:?} exceed epitome channels ({}, {})",
                &self.extent[2..],
                epitome.c_in,
                epitome.c_out
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingFlags {
    pub spatial: bool,
    pub channel: bool,
    pub filter: bool,
}

impl Default for SamplingFlags {
    fn default() -> Self {
        SamplingFlags {
            spatial: true,
            channel: true,
            filter: true,
        }
    }
}

/// Whether each input-channel block carries its own spatial start or all
/// blocks share the first block's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    #[default]
    PerBlock,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrapPolicy {
    #[default]
    Circular,
    /// Reading past an epitome edge is an error.
    Strict,
}

/// Per-layer declaration: logical weight shape, epitome shape, block sizes
/// and super-index group lengths, plus the convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub weight: Shape4,
    pub epitome: Shape4,
    pub beta_in: usize,
    pub beta_out: usize,
    pub group_in: usize,
    pub group_out: usize,
    pub sampling: SamplingFlags,
    pub spatial_mode: SpatialMode,
    pub wrap: WrapPolicy,
    pub geometry: ConvGeometry,
}

impl LayerPlan {
    /// Plan with the default block sizes `beta = epitome channels` and group
    /// lengths equal to the block sizes.
    pub fn new(weight: Shape4, epitome: Shape4) -> Result<Self> {
        let plan = LayerPlan {
            weight,
            epitome,
            beta_in: epitome.c_in,
            beta_out: epitome.c_out,
            group_in: epitome.c_in,
            group_out: epitome.c_out,
            sampling: SamplingFlags::default(),
            spatial_mode: SpatialMode::default(),
            wrap: WrapPolicy::default(),
            geometry: ConvGeometry::default(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_betas(mut self, beta_in: usize, beta_out: usize) -> Result<Self> {
        self.beta_in = beta_in;
        self.beta_out = beta_out;
        self.group_in = gcd(beta_in, self.epitome.c_in);
        self.group_out = gcd(beta_out, self.epitome.c_out);
        self.validate()?;
        Ok(self)
    }

    pub fn with_groups(mut self, group_in: usize, group_out: usize) -> Result<Self> {
        self.group_in = group_in;
        self.group_out = group_out;
        self.validate()?;
        Ok(self)
    }

    pub fn with_geometry(mut self, geometry: ConvGeometry) -> Self {
        self.geometry = geometry;
        self
    }

    pub fn with_sampling(mut self, sampling: SamplingFlags) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_spatial_mode(mut self, mode: SpatialMode) -> Self {
        self.spatial_mode = mode;
        self
    }

    pub fn with_wrap(mut self, wrap: WrapPolicy) -> Self {
        self.wrap = wrap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.as_array().contains(&0) || self.epitome.as_array().contains(&0) {
            return Err(NesError::config("weight and epitome extents must be >= 1"));
        }
        if self.beta_in == 0 || self.beta_in > self.epitome.c_in {
            return Err(NesError::config(format!(
                "beta_in {} must be in 1..={}",
                self.beta_in, self.epitome.c_in
            )));
        }
        if self.beta_out == 0 || self.beta_out > self.epitome.c_out {
            return Err(NesError::config(format!(
                "beta_out {} must be in 1..={}",
                self.beta_out, self.epitome.c_out
            )));
        }
        for (g, len, name) in [
            (self.group_in, self.epitome.c_in, "group_in"),
            (self.group_out, self.epitome.c_out, "group_out"),
        ] {
            if g == 0 || g > len || len % g != 0 {
                return Err(NesError::config(format!(
                    "{name} {g} must divide the epitome axis length {len}"
                )));
            }
        }
        if self.geometry.stride == 0 {
            return Err(NesError::config("stride must be >= 1"));
        }
        Ok(())
    }

    pub fn r_cin(&self) -> usize {
        self.weight.c_in.div_ceil(self.beta_in)
    }

    pub fn r_cout(&self) -> usize {
        self.weight.c_out.div_ceil(self.beta_out)
    }

    /// Numbers stored in the routing map: `3 * R_cin + R_cout`.
    pub fn index_count(&self) -> usize {
        3 * self.r_cin() + self.r_cout()
    }

    /// Epitome values plus routing-map entries.
    pub fn stored_numbers(&self) -> usize {
        self.epitome.numel() + self.index_count()
    }

    /// Upper bound (exclusive) of each flat index entry.
    pub fn index_limits(&self) -> Vec<f64> {
        let e = self.epitome;
        let mut v = Vec::with_capacity(self.index_count());
        for _ in 0..self.r_cin() {
            v.extend([e.w as f64, e.h as f64, e.c_in as f64]);
        }
        v.extend(std::iter::repeat_n(e.c_out as f64, self.r_cout()));
        v
    }

    /// Starts actually used for input block `m` after flags and spatial mode.
    pub(crate) fn input_starts(&self, idx: &IndexSet, m: usize) -> [f64; 3] {
        let src = match self.spatial_mode {
            SpatialMode::PerBlock => m,
            SpatialMode::Shared => 0,
        };
        let (p, q) = if self.sampling.spatial {
            (idx.input[src][0], idx.input[src][1])
        } else {
            (0.0, 0.0)
        };
        let c = if self.sampling.channel {
            idx.input[m][2]
        } else {
            0.0
        };
        [p, q, c]
    }

    pub(crate) fn filter_start(&self, idx: &IndexSet, r: usize) -> f64 {
        if self.sampling.filter {
            idx.filter[r]
        } else {
            0.0
        }
    }

    /// Flat index-vector slots that receive the gradient of `(p, q, c)` of
    /// input block `m`, `None` where the entry is inert.
    pub(crate) fn input_grad_slots(&self, m: usize) -> [Option<usize>; 3] {
        let src = match self.spatial_mode {
            SpatialMode::PerBlock => m,
            SpatialMode::Shared => 0,
        };
        let sp = self.sampling.spatial;
        [
            sp.then_some(3 * src),
            sp.then_some(3 * src + 1),
            self.sampling.channel.then_some(3 * m + 2),
        ]
    }

    pub(crate) fn filter_grad_slot(&self, r: usize) -> Option<usize> {
        self.sampling.filter.then_some(3 * self.r_cin() + r)
    }
}

/// Starting indices for every block of a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSet {
    /// `(p, q, c_in)` per input-channel block.
    pub input: Vec<[f64; 3]>,
    /// `c_out` per filter block.
    pub filter: Vec<f64>,
}

impl IndexSet {
    pub fn zeros(plan: &LayerPlan) -> Self {
        IndexSet {
            input: vec![[0.0; 3]; plan.r_cin()],
            filter: vec![0.0; plan.r_cout()],
        }
    }

    /// Layout: `p0, q0, c0, p1, q1, c1, ..., d0, d1, ...`.
    pub fn from_flat(plan: &LayerPlan, flat: &[f64]) -> Result<Self> {
        if flat.len() != plan.index_count() {
            return Err(NesError::config(format!(
                "expected {} indices (3 * {} + {}), got {}",
                plan.index_count(),
                plan.r_cin(),
                plan.r_cout(),
                flat.len()
            )));
        }
        let n = 3 * plan.r_cin();
        let set = IndexSet {
            input: flat[..n].chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            filter: flat[n..].to_vec(),
        };
        set.validate(plan)?;
        Ok(set)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.input.iter().flat_map(|t| t.iter().copied()).collect();
        v.extend_from_slice(&self.filter);
        v
    }

    pub fn validate(&self, plan: &LayerPlan) -> Result<()> {
        if self.input.len() != plan.r_cin() || self.filter.len() != plan.r_cout() {
            return Err(NesError::config(format!(
                "index set has {} input / {} filter blocks, plan needs {} / {}",
                self.input.len(),
                self.filter.len(),
                plan.r_cin(),
                plan.r_cout()
            )));
        }
        for (v, lim) in self.to_flat().iter().zip(plan.index_limits()) {
            if !(v.is_finite() && *v >= 0.0 && *v < lim) {
                return Err(NesError::config(format!("index {v} outside [0, {lim})")));
            }
        }
        Ok(())
    }
}

/// Triangular interpolation kernel `max(0, 1 - |a - b|)`.
pub fn interp_kernel(a: f64, b: f64) -> f64 {
    (1.0 - (a - b).abs()).max(0.0)
}

/// Interpolation terms on one axis: the neighbouring integer starts of a
/// fractional start (on a grid of spacing `group`), their blend weights, and
/// the derivative of each weight with respect to the start.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisTerms {
    pub idx: [usize; 2],
    pub wt: [f64; 2],
    pub slope: [f64; 2],
    pub count: usize,
}

pub(crate) fn axis_terms(start: f64, len: usize, group: usize) -> AxisTerms {
    let g = group as f64;
    let u = start / g;
    let n0 = u.floor();
    let frac = u - n0;
    let n0i = n0 as usize;
    let idx0 = (n0i * group) % len;
    let idx1 = ((n0i + 1) * group) % len;
    let w0 = interp_kernel(n0, u);
    let w1 = interp_kernel(n0 + 1.0, u);
    // Kinks (integer u) get subgradient 0 on both sides.
    let (s0, s1) = if frac > 0.0 { (-1.0 / g, 1.0 / g) } else { (0.0, 0.0) };
    if frac > 0.0 && idx0 == idx1 {
        // both neighbours wrap onto the same start: the blend is a plain copy
        AxisTerms {
            idx: [idx0, idx1],
            wt: [1.0, 0.0],
            slope: [0.0, 0.0],
            count: 1,
        }
    } else if frac > 0.0 {
        AxisTerms {
            idx: [idx0, idx1],
            wt: [w0, w1],
            slope: [s0, s1],
            count: 2,
        }
    } else {
        AxisTerms {
            idx: [idx0, idx1],
            wt: [w0, 0.0],
            slope: [s0, s1],
            count: 1,
        }
    }
}

/// One interpolation term of one logical weight element.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    /// Flat offset into the logical weight tensor.
    pub weight: usize,
    /// Flat offset into the epitome.
    pub source: usize,
    /// Blend coefficient (product of the four axis weights).
    pub alpha: f64,
    /// d alpha / d (p, q, c_in, c_out) of the owning blocks.
    pub dalpha: [f64; 4],
    pub in_block: usize,
    pub out_block: usize,
}

/// Visits every (weight element, epitome source) pair of the expansion,
/// filter blocks outermost, input-channel blocks inside.
pub(crate) fn for_each_tap(
    plan: &LayerPlan,
    idx: &IndexSet,
    with_slopes: bool,
    mut f: impl FnMut(&Tap),
) -> Result<()> {
    plan.validate()?;
    idx.validate(plan)?;
    let e = plan.epitome;
    let wt = plan.weight;
    let strict = plan.wrap == WrapPolicy::Strict;
    // epitome strides
    let (es0, es1, es2) = (e.h * e.c_in * e.c_out, e.c_in * e.c_out, e.c_out);
    // weight strides
    let (ws0, ws1, ws2) = (wt.h * wt.c_in * wt.c_out, wt.c_in * wt.c_out, wt.c_out);

    let check = |n: usize, off: usize, len: usize, axis: &str| -> Result<usize> {
        if strict && n + off >= len {
            return Err(NesError::config(format!(
                "{axis} patch element {} overruns epitome extent {len}",
                n + off
            )));
        }
        Ok((n + off) % len)
    };

    for r in 0..plan.r_cout() {
        let to = axis_terms(plan.filter_start(idx, r), e.c_out, plan.group_out);
        for m in 0..plan.r_cin() {
            let [p, q, c] = plan.input_starts(idx, m);
            let tw = axis_terms(p, e.w, 1);
            let th = axis_terms(q, e.h, 1);
            let tc = axis_terms(c, e.c_in, plan.group_in);
            for b in 0..plan.beta_out {
                let o = r * plan.beta_out + b;
                if o >= wt.c_out {
                    break;
                }
                for a in 0..plan.beta_in {
                    let ch = m * plan.beta_in + a;
                    if ch >= wt.c_in {
                        break;
                    }
                    for i in 0..wt.w {
                        for j in 0..wt.h {
                            let weight = i * ws0 + j * ws1 + ch * ws2 + o;
                            for kw in 0..tw.count {
                                let x = check(tw.idx[kw], i, e.w, "spatial")?;
                                for kh in 0..th.count {
                                    let y = check(th.idx[kh], j, e.h, "spatial")?;
                                    for kc in 0..tc.count {
                                        let k = check(tc.idx[kc], a, e.c_in, "channel")?;
                                        for ko in 0..to.count {
                                            let n = check(to.idx[ko], b, e.c_out, "filter")?;
                                            let (aw, ah, ac, ao) =
                                                (tw.wt[kw], th.wt[kh], tc.wt[kc], to.wt[ko]);
                                            let dalpha = if with_slopes {
                                                [
                                                    tw.slope[kw] * ah * ac * ao,
                                                    aw * th.slope[kh] * ac * ao,
                                                    aw * ah * tc.slope[kc] * ao,
                                                    aw * ah * ac * to.slope[ko],
                                                ]
                                            } else {
                                                [0.0; 4]
                                            };
                                            f(&Tap {
                                                weight,
                                                source: x * es0 + y * es1 + k * es2 + n,
                                                alpha: aw * ah * ac * ao,
                                                dalpha,
                                                in_block: m,
                                                out_block: r,
                                            });
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn check_plan_epitome(plan: &LayerPlan, e: &Epitome) -> Result<()> {
    if e.shape() != plan.epitome {
        return Err(NesError::DimensionMismatch {
            op: "epitome vs plan",
            left: e.shape().as_array().to_vec(),
            right: plan.epitome.as_array().to_vec(),
        });
    }
    Ok(())
}

/// Expands `e` into the plan's logical `[w, h, C_in, C_out]` weights.
pub fn expand_weights(e: &Epitome, plan: &LayerPlan, idx: &IndexSet) -> Result<Tensor> {
    check_plan_epitome(plan, e)?;
    let mut out = vec![0.0; plan.weight.numel()];
    let src = e.values().data();
    for_each_tap(plan, idx, false, |t| out[t.weight] += t.alpha * src[t.source])?;
    Tensor::new(plan.weight.as_array().to_vec(), out)
}

/// Expands an epitome of shape `(1, 1, C_in^E, C_out^E)` into an
/// `[N_in, N_out]` fully-connected matrix.
pub fn expand_fc(e: &Epitome, plan: &LayerPlan, idx: &IndexSet) -> Result<Tensor> {
    if plan.weight.w != 1 || plan.weight.h != 1 || plan.epitome.w != 1 || plan.epitome.h != 1 {
        return Err(NesError::config(
            "fully-connected plans need w = h = 1 for both weights and epitome",
        ));
    }
    let t = expand_weights(e, plan, idx)?;
    t.reshape(&[plan.weight.c_in, plan.weight.c_out])
}

/// Spatial resampling of the whole epitome: a `[w, h, C_in^E, C_out^E]`
/// patch starting at fractional `(p, q)`.
pub fn sample_spatial(
    e: &Epitome,
    p: f64,
    q: f64,
    w: usize,
    h: usize,
    wrap: WrapPolicy,
) -> Result<Tensor> {
    let s = e.shape();
    SubTensorSpec {
        start: [p, q, 0.0, 0.0],
        extent: [w, h, s.c_in, s.c_out],
    }
    .validate(s)?;
    let tw = axis_terms(p, s.w, 1);
    let th = axis_terms(q, s.h, 1);
    let v = e.values();
    let mut out = Tensor::zeros(&[w, h, s.c_in, s.c_out]);
    let cc = s.c_in * s.c_out;
    for i in 0..w {
        for j in 0..h {
            for kw in 0..tw.count {
                for kh in 0..th.count {
                    let (x, y) = (tw.idx[kw] + i, th.idx[kh] + j);
                    if wrap == WrapPolicy::Strict && (x >= s.w || y >= s.h) {
                        return Err(NesError::OutOfRange {
                            index: vec![x, y],
                            shape: vec![s.w, s.h],
                        });
                    }
                    let (x, y) = (x % s.w, y % s.h);
                    let a = tw.wt[kw] * th.wt[kh];
                    let src = &v.data()[(x * s.h + y) * cc..][..cc];
                    let dst = &mut out.data_mut()[(i * h + j) * cc..][..cc];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += a * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `beta` consecutive input channels starting at fractional `c_in`, wrapping
/// modulo `C_in^E`. Shape `[W^E, H^E, beta, C_out^E]`.
pub fn sample_channel(e: &Epitome, c_in: f64, beta: usize) -> Result<Tensor> {
    sample_channel_axis(e, c_in, beta, 2)
}

/// Filter-axis mirror of [`sample_channel`]. Shape `[W^E, H^E, C_in^E, beta]`.
pub fn sample_filter(e: &Epitome, c_out: f64, beta: usize) -> Result<Tensor> {
    sample_channel_axis(e, c_out, beta, 3)
}

fn sample_channel_axis(e: &Epitome, start: f64, beta: usize, axis: usize) -> Result<Tensor> {
    let s = e.shape().as_array();
    let len = s[axis];
    if beta == 0 || beta > len {
        return Err(NesError::config(format!(
            "block size {beta} must be in 1..={len} on axis {axis}"
        )));
    }
    if !(start.is_finite() && start >= 0.0 && start < len as f64) {
        return Err(NesError::config(format!("start {start} outside [0, {len})")));
    }
    let t = axis_terms(start, len, 1);
    let mut shape = s;
    shape[axis] = beta;
    let v = e.values();
    Ok(Tensor::from_fn(&shape, |ix| {
        let mut src = [ix[0], ix[1], ix[2], ix[3]];
        let mut acc = 0.0;
        for k in 0..t.count {
            src[axis] = (t.idx[k] + ix[axis]) % len;
            acc += t.wt[k] * v.get(&src).expect("index in range");
        }
        acc
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape4) -> Epitome {
        Epitome::new(Tensor::from_fn(&shape.as_array(), |i| {
            (1 + i[0] * 1000 + i[1] * 100 + i[2] * 10 + i[3]) as f64
        }))
        .unwrap()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(interp_kernel(2.0, 2.0), 1.0);
        assert!((interp_kernel(2.0, 2.4) - 0.6).abs() < 1e-15);
        assert_eq!(interp_kernel(5.0, 3.4), 0.0);
    }

    #[test]
    fn axis_terms_at_quarter() {
        let t = axis_terms(1.25, 4, 1);
        assert_eq!(t.count, 2);
        assert_eq!(t.idx, [1, 2]);
        assert!((t.wt[0] - 0.75).abs() < 1e-15 && (t.wt[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn axis_terms_on_group_grid() {
        // group 4 on an 8-long axis: start 5 sits between starts 4 and 8 = 0
        let t = axis_terms(5.0, 8, 4);
        assert_eq!(t.idx, [4, 0]);
        assert!((t.wt[0] - 0.75).abs() < 1e-15);
        assert!((t.slope[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn identity_spatial_sampling() {
        let e = ramp(Shape4::new(3, 2, 2, 2));
        let s = sample_spatial(&e, 0.0, 0.0, 3, 2, WrapPolicy::Circular).unwrap();
        assert_eq!(&s, e.values());
    }

    #[test]
    fn one_dimensional_wrap_blend() {
        let e = Epitome::new(Tensor::new(vec![3, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let s = sample_spatial(&e, 0.5, 0.0, 3, 1, WrapPolicy::Circular).unwrap();
        let expected = [1.5, 2.5, 2.0];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(sample_spatial(&e, 0.5, 0.0, 3, 1, WrapPolicy::Strict).is_err());
    }

    #[test]
    fn strict_wrap_accepts_in_range_patch() {
        let e = ramp(Shape4::new(4, 1, 1, 1));
        let s = sample_spatial(&e, 1.0, 0.0, 3, 1, WrapPolicy::Strict).unwrap();
        assert_eq!(s.data(), &e.values().data()[1..4]);
    }

    #[test]
    fn channel_and_filter_exact_blocks() {
        let e = ramp(Shape4::new(1, 1, 4, 3));
        let c = sample_channel(&e, 0.0, 2).unwrap();
        assert_eq!(c.shape(), &[1, 1, 2, 3]);
        assert_eq!(c.get(&[0, 0, 1, 2]).unwrap(), e.values().get(&[0, 0, 1, 2]).unwrap());
        let f = sample_filter(&e, 2.0, 2).unwrap();
        // start 2, second element wraps to filter 0
        assert_eq!(f.get(&[0, 0, 3, 1]).unwrap(), e.values().get(&[0, 0, 3, 0]).unwrap());
        assert!(sample_channel(&e, 0.0, 5).is_err());
    }

    #[test]
    fn identity_configuration_expands_to_epitome() {
        let shape = Shape4::new(3, 3, 2, 4);
        let plan = LayerPlan::new(shape, shape).unwrap();
        let e = ramp(shape);
        let w = expand_weights(&e, &plan, &IndexSet::zeros(&plan)).unwrap();
        assert_eq!(&w, e.values());
    }

    #[test]
    fn integer_indices_copy_elements() {
        let plan = LayerPlan::new(Shape4::new(2, 2, 6, 5), Shape4::new(3, 3, 3, 2))
            .unwrap()
            .with_groups(1, 1)
            .unwrap();
        let e = ramp(plan.epitome);
        let idx = IndexSet {
            input: vec![[1.0, 2.0, 1.0], [0.0, 1.0, 2.0]],
            filter: vec![1.0, 0.0, 1.0],
        };
        let w = expand_weights(&e, &plan, &idx).unwrap();
        let pool = e.values().data();
        assert!(w.data().iter().all(|v| pool.contains(v)));
        // second filter block, first input block, element (1,1,a=2,b=0):
        // x = 1+1, y = (2+1)%3, k = (1+2)%3, n = 0
        let expect = e.values().get(&[2, 0, 0, 0]).unwrap();
        assert_eq!(w.get(&[1, 1, 2, 2]).unwrap(), expect);
    }

    #[test]
    fn truncates_final_partial_blocks() {
        let plan = LayerPlan::new(Shape4::new(1, 1, 5, 3), Shape4::new(1, 1, 2, 2)).unwrap();
        assert_eq!((plan.r_cin(), plan.r_cout()), (3, 2));
        assert_eq!(plan.index_count(), 11);
        let e = ramp(plan.epitome);
        let w = expand_weights(&e, &plan, &IndexSet::zeros(&plan)).unwrap();
        assert_eq!(w.shape(), &[1, 1, 5, 3]);
        assert_eq!(w.get(&[0, 0, 4, 2]).unwrap(), e.values().get(&[0, 0, 0, 0]).unwrap());
    }

    #[test]
    fn index_count_mismatch_is_config_error() {
        let plan = LayerPlan::new(Shape4::new(1, 1, 4, 4), Shape4::new(1, 1, 2, 2)).unwrap();
        let bad = IndexSet {
            input: vec![[0.0; 3]],
            filter: vec![0.0, 0.0],
        };
        assert!(matches!(
            expand_weights(&ramp(plan.epitome), &plan, &bad),
            Err(NesError::Config(_))
        ));
        assert!(IndexSet::from_flat(&plan, &[0.0; 7]).is_err());
        assert!(IndexSet::from_flat(&plan, &[0.0; 8]).is_ok());
    }

    #[test]
    fn fc_copy_semantics() {
        let plan = LayerPlan::new(Shape4::new(1, 1, 4, 3), Shape4::new(1, 1, 2, 3)).unwrap();
        let e = ramp(plan.epitome);
        let d = expand_fc(&e, &plan, &IndexSet::zeros(&plan)).unwrap();
        assert_eq!(d.shape(), &[4, 3]);
        for o in 0..3 {
            assert_eq!(d.get(&[0, o]).unwrap(), d.get(&[2, o]).unwrap());
            assert_eq!(d.get(&[1, o]).unwrap(), d.get(&[3, o]).unwrap());
        }
        let conv = LayerPlan::new(Shape4::new(3, 3, 2, 2), Shape4::new(3, 3, 2, 2)).unwrap();
        assert!(expand_fc(&ramp(conv.epitome), &conv, &IndexSet::zeros(&conv)).is_err());
    }

    #[test]
    fn disabled_axes_pin_starts_to_zero() {
        let shape = Shape4::new(2, 2, 2, 2);
        let plan = LayerPlan::new(shape, shape).unwrap().with_sampling(SamplingFlags {
            spatial: false,
            channel: true,
            filter: true,
        });
        let e = ramp(shape);
        let idx = IndexSet {
            input: vec![[1.5, 0.5, 0.0]],
            filter: vec![0.0],
        };
        let w = expand_weights(&e, &plan, &idx).unwrap();
        assert_eq!(&w, e.values());
    }

    #[test]
    fn plan_validation() {
        let w = Shape4::new(3, 3, 8, 8);
        assert!(LayerPlan::new(w, Shape4::new(3, 3, 0, 4)).is_err());
        let plan = LayerPlan::new(w, Shape4::new(3, 3, 4, 4)).unwrap();
        assert!(plan.with_betas(5, 4).is_err());
        assert!(plan.with_groups(3, 4).is_err());
        assert!(plan.with_groups(2, 1).is_ok());
    }
}
