//! Reverse-mode gradients for convolution, epitome expansion and the index
//! path, plus a central-difference gradient checker.

use serde::{Deserialize, Serialize};

use crate::epitome::{expand_weights, for_each_tap, Epitome, IndexSet, LayerPlan, Shape4, SpatialMode};
use crate::error::{NesError, Result};
use crate::learner::{scale_indices, scale_jacobian, IndexLearner};
use crate::tensor::{conv2d_naive, ConvGeometry, Padding, Rng, Tensor};

/// Gradients of `G = conv2d_naive(F, W)` w.r.t. `F` and `W` given `dG`.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    geom: ConvGeometry,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if input.rank() != 3 || weights.rank() != 4 || input.shape()[2] != weights.shape()[2] {
        return Err(NesError::DimensionMismatch {
            op: "conv2d_backward",
            left: input.shape().to_vec(),
            right: weights.shape().to_vec(),
        });
    }
    let (iw, ih, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kw, kh, cout) = (weights.shape()[0], weights.shape()[1], weights.shape()[3]);
    let (ow, pw) = geom.output_extent(iw, kw)?;
    let (oh, ph) = geom.output_extent(ih, kh)?;
    if d_out.shape() != [ow, oh, cout] {
        return Err(NesError::DimensionMismatch {
            op: "conv2d_backward upstream",
            left: d_out.shape().to_vec(),
            right: vec![ow, oh, cout],
        });
    }
    let s = geom.stride;
    let (x, w, g) = (input.data(), weights.data(), d_out.data());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for tw in 0..ow {
        for th in 0..oh {
            let gbase = (tw * oh + th) * cout;
            for i in 0..kw {
                let xw = (tw * s + i) as isize - pw as isize;
                if xw < 0 || xw as usize >= iw {
                    continue;
                }
                for j in 0..kh {
                    let xh = (th * s + j) as isize - ph as isize;
                    if xh < 0 || xh as usize >= ih {
                        continue;
                    }
                    let xbase = ((xw as usize) * ih + xh as usize) * cin;
                    for m in 0..cin {
                        let wbase = ((i * kh + j) * cin + m) * cout;
                        let xv = x[xbase + m];
                        let mut acc = 0.0;
                        for c in 0..cout {
                            acc += g[gbase + c] * w[wbase + c];
                            dw[wbase + c] += xv * g[gbase + c];
                        }
                        dx[xbase + m] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(weights.shape().to_vec(), dw)?,
    ))
}

fn check_weight_grad(plan: &LayerPlan, d_weight: &Tensor) -> Result<()> {
    if d_weight.shape() != plan.weight.as_array() {
        return Err(NesError::DimensionMismatch {
            op: "weight gradient vs plan",
            left: d_weight.shape().to_vec(),
            right: plan.weight.as_array().to_vec(),
        });
    }
    Ok(())
}

/// Scatters a logical-weight gradient back onto the epitome (the adjoint of
/// [`expand_weights`] in the epitome values).
pub fn backward_epitome(d_weight: &Tensor, plan: &LayerPlan, idx: &IndexSet) -> Result<Tensor> {
    check_weight_grad(plan, d_weight)?;
    let g = d_weight.data();
    let mut out = vec![0.0; plan.epitome.numel()];
    for_each_tap(plan, idx, false, |t| out[t.source] += t.alpha * g[t.weight])?;
    Tensor::new(plan.epitome.as_array().to_vec(), out)
}

/// Gradient of the loss w.r.t. the flat starting-index vector. Inert slots
/// (disabled axes, shared spatial entries of blocks other than 0) stay 0, as
/// do contributions from exact-integer starts.
pub fn backward_indices(
    d_weight: &Tensor,
    e: &Epitome,
    plan: &LayerPlan,
    idx: &IndexSet,
) -> Result<Vec<f64>> {
    check_weight_grad(plan, d_weight)?;
    if e.shape() != plan.epitome {
        return Err(NesError::DimensionMismatch {
            op: "epitome vs plan",
            left: e.shape().as_array().to_vec(),
            right: plan.epitome.as_array().to_vec(),
        });
    }
    let g = d_weight.data();
    let src = e.values().data();
    let mut out = vec![0.0; plan.index_count()];
    for_each_tap(plan, idx, true, |t| {
        let v = g[t.weight] * src[t.source];
        for (axis, slot) in plan.input_grad_slots(t.in_block).into_iter().enumerate() {
            if let Some(s) = slot {
                out[s] += v * t.dalpha[axis];
            }
        }
        if let Some(s) = plan.filter_grad_slot(t.out_block) {
            out[s] += v * t.dalpha[3];
        }
    })?;
    Ok(out)
}

/// `param -= lr * grad`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    if !lr.is_finite() {
        return Err(NesError::NonFinite(format!("learning rate {lr}")));
    }
    param.axpy(-lr, grad)
}

/// Gradients of one epitome layer.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub epitome: Tensor,
    /// Gradient w.r.t. the flat starting-index vector.
    pub indices: Vec<f64>,
    /// Learner parameter gradients, in [`IndexLearner::params`] order.
    pub learner: Option<Vec<Tensor>>,
    pub input: Tensor,
}

/// A model whose scalar loss can be differentiated both analytically and by
/// finite differences, parameter group by parameter group.
pub trait GradCheck {
    fn group_names(&self) -> Vec<String>;
    fn group_values(&self, group: usize) -> Vec<f64>;
    fn set_group_values(&mut self, group: usize, values: &[f64]) -> Result<()>;
    fn loss(&self) -> Result<f64>;
    /// Analytic gradient of [`GradCheck::loss`], one vector per group.
    fn gradients(&self) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Denominator floor of the relative error, as a fraction of the largest
/// analytic gradient magnitude in the group.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR * group_scale)`, 0 when both vanish.
pub fn relative_error(analytic: f64, numeric: f64, group_scale: f64) -> f64 {
    let denom = analytic
        .abs()
        .max(numeric.abs())
        .max(RELATIVE_FLOOR * group_scale);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares every group's analytic gradient with central differences of step
/// `epsilon`. `tolerances` gives one bound per group (the last entry repeats).
pub fn grad_check<M: GradCheck>(
    model: &mut M,
    epsilon: f64,
    tolerances: &[f64],
) -> Result<GradCheckReport> {
    if tolerances.is_empty() {
        return Err(NesError::config("grad_check needs at least one tolerance"));
    }
    let base = model.loss()?;
    if !base.is_finite() {
        return Err(NesError::NonFinite("loss".into()));
    }
    let analytic = model.gradients()?;
    let names = model.group_names();
    let mut groups = Vec::with_capacity(names.len());
    for (gi, name) in names.into_iter().enumerate() {
        let tol = tolerances[gi.min(tolerances.len() - 1)];
        let values = model.group_values(gi);
        let a = &analytic[gi];
        if a.len() != values.len() {
            return Err(NesError::DimensionMismatch {
                op: "analytic gradient vs parameters",
                left: vec![a.len()],
                right: vec![values.len()],
            });
        }
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut probe = values.clone();
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for k in 0..values.len() {
            probe[k] = values[k] + epsilon;
            model.set_group_values(gi, &probe)?;
            let up = model.loss()?;
            probe[k] = values[k] - epsilon;
            model.set_group_values(gi, &probe)?;
            let down = model.loss()?;
            probe[k] = values[k];
            if !up.is_finite() || !down.is_finite() {
                model.set_group_values(gi, &values)?;
                return Err(NesError::NonFinite(format!("loss while perturbing {name}[{k}]")));
            }
            let numeric = (up - down) / (2.0 * epsilon);
            max_abs = max_abs.max((a[k] - numeric).abs());
            max_rel = max_rel.max(relative_error(a[k], numeric, scale));
        }
        model.set_group_values(gi, &values)?;
        groups.push(GroupCheck {
            name,
            checked: values.len(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
            passed: max_rel <= tol,
        });
    }
    Ok(GradCheckReport {
        epsilon,
        tolerance: tolerances[0],
        groups,
    })
}

/// A single epitome convolution with squared-error loss
/// `0.5 * |conv(F, expand(E, idx)) - T|^2`. Indices come from the learner
/// when one is attached, otherwise from `indices`.
#[derive(Debug, Clone)]
pub struct LayerProbe {
    pub plan: LayerPlan,
    pub epitome: Epitome,
    pub indices: IndexSet,
    pub learner: Option<IndexLearner>,
    pub input: Tensor,
    pub target: Tensor,
}

impl LayerProbe {
    pub fn current_indices(&self) -> Result<IndexSet> {
        match &self.learner {
            Some(l) => scale_indices(&l.predict_indices(&self.input)?, &self.plan),
            None => Ok(self.indices.clone()),
        }
    }

    /// Smallest distance of any active start from the interpolation grid.
    pub fn kink_distance(&self) -> Result<f64> {
        let idx = self.current_indices()?;
        let p = &self.plan;
        let mut d = f64::INFINITY;
        let mut note = |v: f64, group: usize| {
            let u = v / group as f64;
            d = d.min((u - u.round()).abs());
        };
        for m in 0..p.r_cin() {
            let [a, b, c] = p.input_starts(&idx, m);
            if p.sampling.spatial {
                note(a, 1);
                note(b, 1);
            }
            if p.sampling.channel {
                note(c, p.group_in);
            }
        }
        if p.sampling.filter {
            for r in 0..p.r_cout() {
                note(p.filter_start(&idx, r), p.group_out);
            }
        }
        Ok(d)
    }

    fn residual(&self, idx: &IndexSet) -> Result<(Tensor, Tensor)> {
        let w = expand_weights(&self.epitome, &self.plan, idx)?;
        let out = conv2d_naive(&self.input, &w, self.plan.geometry)?;
        Ok((out.sub(&self.target)?, w))
    }

    pub fn backward(&self) -> Result<GradBundle> {
        let idx = self.current_indices()?;
        let (resid, w) = self.residual(&idx)?;
        let (mut d_input, d_w) = conv2d_backward(&self.input, &w, self.plan.geometry, &resid)?;
        let d_e = backward_epitome(&d_w, &self.plan, &idx)?;
        let d_idx = backward_indices(&d_w, &self.epitome, &self.plan, &idx)?;
        let learner = match &self.learner {
            Some(l) => {
                let trace = l.forward(&self.input)?;
                let jac = scale_jacobian(&self.plan);
                let d_norm: Vec<f64> = d_idx.iter().zip(&jac).map(|(g, j)| g * j).collect();
                let grads = l.backward(&trace, &d_norm)?;
                d_input.axpy(1.0, &grads.input)?;
                Some(grads.params)
            }
            None => None,
        };
        Ok(GradBundle {
            epitome: d_e,
            indices: d_idx,
            learner,
            input: d_input,
        })
    }
}

impl GradCheck for LayerProbe {
    fn group_names(&self) -> Vec<String> {
        let second = if self.learner.is_some() { "learner" } else { "indices" };
        vec!["epitome".into(), second.into()]
    }

    fn group_values(&self, group: usize) -> Vec<f64> {
        match (group, &self.learner) {
            (0, _) => self.epitome.values().data().to_vec(),
            (_, Some(l)) => l.flat_params(),
            (_, None) => self.indices.to_flat(),
        }
    }

    fn set_group_values(&mut self, group: usize, values: &[f64]) -> Result<()> {
        match group {
            0 => {
                if values.len() != self.epitome.len() {
                    return Err(NesError::config("epitome value count mismatch"));
                }
                self.epitome.values_mut().data_mut().copy_from_slice(values);
                Ok(())
            }
            _ => match &mut self.learner {
                Some(l) => l.set_flat_params(values),
                None => {
                    self.indices = IndexSet::from_flat(&self.plan, values)?;
                    Ok(())
                }
            },
        }
    }

    fn loss(&self) -> Result<f64> {
        let idx = self.current_indices()?;
        let (resid, _) = self.residual(&idx)?;
        let l = 0.5 * resid.dot(&resid)?;
        if !l.is_finite() {
            return Err(NesError::NonFinite("probe loss".into()));
        }
        Ok(l)
    }

    fn gradients(&self) -> Result<Vec<Vec<f64>>> {
        let b = self.backward()?;
        let second = match b.learner {
            Some(ts) => ts.iter().flat_map(|t| t.data().iter().copied()).collect(),
            None => b.indices,
        };
        Ok(vec![b.epitome.into_data(), second])
    }
}

/// Layer family of a randomly drawn [`LayerProbe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Conv1d,
    Conv2d,
    Fc,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [ProbeKind::Conv1d, ProbeKind::Conv2d, ProbeKind::Fc];
}

/// Draws a small random probe: epitome channels in `1..=4`, logical channels
/// up to twice that, random block sizes, stride, padding and spatial mode.
/// Draws are repeated until every active start lies at least `min_kink`
/// from the interpolation grid.
pub fn random_probe(rng: &mut Rng, kind: ProbeKind, with_learner: bool, min_kink: f64) -> Result<LayerProbe> {
    const ATTEMPTS: usize = 200;
    for _ in 0..ATTEMPTS {
        let ce_in = rng.int_range(1, 4);
        let ce_out = rng.int_range(1, 4);
        let c_in = rng.int_range(ce_in, 2 * ce_in + 1);
        let c_out = rng.int_range(ce_out, 2 * ce_out + 1);
        let (ew, eh, kw, kh, iw, ih) = match kind {
            ProbeKind::Conv2d => {
                let (ew, eh) = (rng.int_range(1, 3), rng.int_range(1, 3));
                let (kw, kh) = (rng.int_range(1, ew), rng.int_range(1, eh));
                (ew, eh, kw, kh, rng.int_range(3, 5), rng.int_range(3, 5))
            }
            ProbeKind::Conv1d => {
                let ew = rng.int_range(1, 4);
                (ew, 1, rng.int_range(1, ew), 1, rng.int_range(4, 7), 1)
            }
            ProbeKind::Fc => (1, 1, 1, 1, 1, 1),
        };
        let geometry = match kind {
            ProbeKind::Fc => ConvGeometry::default(),
            _ => ConvGeometry::new(
                rng.int_range(1, 2),
                if rng.uniform() < 0.5 { Padding::Same } else { Padding::Valid },
            ),
        };
        let mode = if rng.uniform() < 0.5 {
            SpatialMode::PerBlock
        } else {
            SpatialMode::Shared
        };
        let plan = LayerPlan::new(Shape4::new(kw, kh, c_in, c_out), Shape4::new(ew, eh, ce_in, ce_out))?
            .with_betas(rng.int_range(1, ce_in), rng.int_range(1, ce_out))?
            .with_geometry(geometry)
            .with_spatial_mode(mode);
        let epitome = Epitome::random(plan.epitome, 1.0, rng)?;
        let input = Tensor::randn(&[iw, ih, c_in], 1.0, rng);
        let flat: Vec<f64> = plan
            .index_limits()
            .iter()
            .map(|&l| rng.uniform_range(0.0, l))
            .collect();
        let indices = IndexSet::from_flat(&plan, &flat)?;
        let learner = with_learner.then(|| IndexLearner::new(c_in, kind == ProbeKind::Conv2d, plan.index_count(), rng));
        let (ow, _) = geometry.output_extent(iw, kw)?;
        let (oh, _) = geometry.output_extent(ih, kh)?;
        let target = Tensor::randn(&[ow, oh, c_out], 1.0, rng);
        let probe = LayerProbe {
            plan,
            epitome,
            indices,
            learner,
            input,
            target,
        };
        if probe.kink_distance()? >= min_kink {
            return Ok(probe);
        }
    }
    Err(NesError::state(format!(
        "no {kind:?} probe with starts {min_kink} away from the grid after {ATTEMPTS} draws"
    )))
}
