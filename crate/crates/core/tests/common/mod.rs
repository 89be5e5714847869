//! Random instance generators and loop oracles shared by the integration
//! tests and the acceptance suite.
#![allow(dead_code)]

use nes::epitome::{interp_kernel, Epitome, IndexSet, LayerPlan, Shape4, SpatialMode};
use nes::tensor::{ConvGeometry, Padding, Rng, Tensor};

/// A plan, an epitome and a valid index set.
#[derive(Debug, Clone)]
pub struct Case {
    pub plan: LayerPlan,
    pub epitome: Epitome,
    pub indices: IndexSet,
}

/// Random index set; roughly a third of the entries are snapped to the
/// integer grid when `allow_integer` is set.
pub fn random_indices(plan: &LayerPlan, rng: &mut Rng, allow_integer: bool) -> IndexSet {
    let flat: Vec<f64> = plan
        .index_limits()
        .iter()
        .map(|&l| {
            let v = rng.uniform_range(0.0, l);
            if allow_integer && rng.uniform() < 0.35 {
                v.floor()
            } else {
                v
            }
        })
        .collect();
    IndexSet::from_flat(plan, &flat).expect("indices within limits")
}

/// Random plan with epitome extents `1..=max_e` on every axis, logical
/// channels up to twice (plus one) the epitome channels, random block sizes
/// and spatial mode. `spatial` bounds the kernel extent; 0 means a 1x1 layer.
pub fn random_plan(rng: &mut Rng, max_e: usize, spatial: [usize; 2]) -> LayerPlan {
    let ce_in = rng.int_range(1, max_e);
    let ce_out = rng.int_range(1, max_e);
    let ew = if spatial[0] > 0 { rng.int_range(1, max_e) } else { 1 };
    let eh = if spatial[1] > 0 { rng.int_range(1, max_e) } else { 1 };
    let kw = if spatial[0] > 0 { rng.int_range(1, spatial[0]) } else { 1 };
    let kh = if spatial[1] > 0 { rng.int_range(1, spatial[1]) } else { 1 };
    let c_in = rng.int_range(1, 2 * ce_in + 1);
    let c_out = rng.int_range(1, 2 * ce_out + 1);
    let mode = if rng.uniform() < 0.5 {
        SpatialMode::PerBlock
    } else {
        SpatialMode::Shared
    };
    LayerPlan::new(Shape4::new(kw, kh, c_in, c_out), Shape4::new(ew, eh, ce_in, ce_out))
        .and_then(|p| p.with_betas(rng.int_range(1, ce_in), rng.int_range(1, ce_out)))
        .expect("valid random plan")
        .with_spatial_mode(mode)
}

pub fn random_case(rng: &mut Rng, max_e: usize, spatial: [usize; 2], allow_integer: bool) -> Case {
    let plan = random_plan(rng, max_e, spatial);
    let epitome = Epitome::random(plan.epitome, 1.0, rng).expect("epitome");
    let indices = random_indices(&plan, rng, allow_integer);
    Case {
        plan,
        epitome,
        indices,
    }
}

/// Starts `(p, q, c_in, c_out)` that drive logical element `(., ., c, k)`.
pub fn starts_for(plan: &LayerPlan, idx: &IndexSet, c: usize, k: usize) -> [f64; 4] {
    let flat = idx.to_flat();
    let m = c / plan.beta_in;
    let r = k / plan.beta_out;
    let sp = match plan.spatial_mode {
        SpatialMode::PerBlock => m,
        SpatialMode::Shared => 0,
    };
    [
        flat[3 * sp],
        flat[3 * sp + 1],
        flat[3 * m + 2],
        flat[3 * plan.r_cin() + r],
    ]
}

/// Full-sum form of the interpolation on one axis: every grid start
/// `n = 0..=len/group` weighted by the triangular kernel, with the source
/// position `n * group + offset` taken modulo `len`.
pub fn axis_weights(start: f64, len: usize, group: usize, offset: usize) -> Vec<(usize, f64)> {
    let u = start / group as f64;
    (0..=len / group)
        .filter_map(|n| {
            let k = interp_kernel(n as f64, u);
            (k > 0.0).then_some(((n * group + offset) % len, k))
        })
        .collect()
}

/// Brute-force expansion: each logical element is the four-fold kernel
/// sum over epitome positions.
pub fn expand_oracle(e: &Epitome, plan: &LayerPlan, idx: &IndexSet) -> Tensor {
    let es = plan.epitome;
    let v = e.values();
    Tensor::from_fn(&plan.weight.as_array(), |ix| {
        let [i, j, c, k] = [ix[0], ix[1], ix[2], ix[3]];
        let [p, q, cs, ks] = starts_for(plan, idx, c, k);
        let mut acc = 0.0;
        for (a, wa) in axis_weights(p, es.w, 1, i) {
            for (b, wb) in axis_weights(q, es.h, 1, j) {
                for (cc, wc) in axis_weights(cs, es.c_in, plan.group_in, c % plan.beta_in) {
                    for (kk, wk) in axis_weights(ks, es.c_out, plan.group_out, k % plan.beta_out) {
                        acc += wa * wb * wc * wk * v.get(&[a, b, cc, kk]).unwrap();
                    }
                }
            }
        }
        acc
    })
}

/// Epitome positions per axis that can influence logical element `ix`.
pub fn support(plan: &LayerPlan, idx: &IndexSet, ix: [usize; 4]) -> [Vec<usize>; 4] {
    let es = plan.epitome;
    let [p, q, cs, ks] = starts_for(plan, idx, ix[2], ix[3]);
    let pos = |s: f64, len: usize, g: usize, off: usize| -> Vec<usize> {
        axis_weights(s, len, g, off).into_iter().map(|(n, _)| n).collect()
    };
    [
        pos(p, es.w, 1, ix[0]),
        pos(q, es.h, 1, ix[1]),
        pos(cs, es.c_in, plan.group_in, ix[2] % plan.beta_in),
        pos(ks, es.c_out, plan.group_out, ix[3] % plan.beta_out),
    ]
}

/// Direct-loop convolution over `[W, H, C]` inputs and `[w, h, C_in, C_out]`
/// weights, zero padding split as `total / 2` before.
pub fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, padding: Padding) -> Tensor {
    let (iw, ih, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kw, kh, co) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let extent = |n: usize, k: usize| -> (usize, usize) {
        match padding {
            Padding::Valid => ((n - k) / stride + 1, 0),
            Padding::Same => {
                let out = n.div_ceil(stride);
                (out, ((out - 1) * stride + k).saturating_sub(n) / 2)
            }
            Padding::Explicit(p) => ((n + 2 * p - k) / stride + 1, p),
        }
    };
    let (ow, pw) = extent(iw, kw);
    let (oh, ph) = extent(ih, kh);
    Tensor::from_fn(&[ow, oh, co], |o| {
        let mut acc = 0.0;
        for a in 0..kw {
            for b in 0..kh {
                let xi = (o[0] * stride + a) as isize - pw as isize;
                let yi = (o[1] * stride + b) as isize - ph as isize;
                if xi < 0 || yi < 0 || xi as usize >= iw || yi as usize >= ih {
                    continue;
                }
                for c in 0..ci {
                    acc += x.get(&[xi as usize, yi as usize, c]).unwrap() * w.get(&[a, b, c, o[2]]).unwrap();
                }
            }
        }
        acc
    })
}

pub fn random_geometry(rng: &mut Rng) -> ConvGeometry {
    let padding = if rng.uniform() < 0.5 { Padding::Same } else { Padding::Valid };
    ConvGeometry::new(rng.int_range(1, 2), padding)
}

/// `max |a - b| / max(1, max |b|)`.
pub fn rel_gap(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b).unwrap() / b.max_abs().max(1.0)
}
