//! The indexing learner: a small two-layer convolutional module that maps a
//! layer's input features to normalized starting indices in `(0, 1)`, and the
//! scaling that turns those into epitome coordinates.

use serde::{Deserialize, Serialize};

use crate::autograd::conv2d_backward;
use crate::epitome::{IndexSet, LayerPlan};
use crate::error::{NesError, Result};
use crate::tensor::{conv2d_naive, ConvGeometry, Padding, Rng, Tensor};

/// Channels of both hidden convolutions.
pub const LEARNER_WIDTH: usize = 4;

const LEARNER_GEOMETRY: ConvGeometry = ConvGeometry {
    stride: 2,
    padding: Padding::Same,
};

/// Super-index group lengths for the channel and filter axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperIndexConfig {
    pub group_in: usize,
    pub group_out: usize,
}

impl From<&LayerPlan> for SuperIndexConfig {
    fn from(plan: &LayerPlan) -> Self {
        SuperIndexConfig {
            group_in: plan.group_in,
            group_out: plan.group_out,
        }
    }
}

/// Parameters: `conv1 [3, kh, C_in, 4]`, `conv2 [3, kh, 4, 4]`, their biases,
/// and a linear head `[4, K]` with bias, where `K = 3 R_cin + R_cout` and
/// `kh` is 3 for 2-D inputs and 1 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexLearner {
    pub conv1: Tensor,
    pub bias1: Tensor,
    pub conv2: Tensor,
    pub bias2: Tensor,
    pub head: Tensor,
    pub head_bias: Tensor,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LearnerTrace {
    input: Tensor,
    act1: Tensor,
    act2: Tensor,
    pooled: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LearnerGrads {
    /// Same order as [`IndexLearner::params`].
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_bias_tanh(z: &mut Tensor, bias: &Tensor) {
    let c = bias.len();
    for (k, v) in z.data_mut().iter_mut().enumerate() {
        *v = (*v + bias.data()[k % c]).tanh();
    }
}

impl IndexLearner {
    pub fn new(in_channels: usize, two_d: bool, outputs: usize, rng: &mut Rng) -> Self {
        let kh = if two_d { 3 } else { 1 };
        let std1 = 1.0 / ((3 * kh * in_channels) as f64).sqrt();
        let std2 = 1.0 / ((3 * kh * LEARNER_WIDTH) as f64).sqrt();
        IndexLearner {
            conv1: Tensor::randn(&[3, kh, in_channels, LEARNER_WIDTH], std1, rng),
            bias1: Tensor::zeros(&[LEARNER_WIDTH]),
            conv2: Tensor::randn(&[3, kh, LEARNER_WIDTH, LEARNER_WIDTH], std2, rng),
            bias2: Tensor::zeros(&[LEARNER_WIDTH]),
            head: Tensor::randn(&[LEARNER_WIDTH, outputs], 0.5, rng),
            head_bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(in_channels: usize, two_d: bool, outputs: usize) -> Self {
        let kh = if two_d { 3 } else { 1 };
        IndexLearner {
            conv1: Tensor::zeros(&[3, kh, in_channels, LEARNER_WIDTH]),
            bias1: Tensor::zeros(&[LEARNER_WIDTH]),
            conv2: Tensor::zeros(&[3, kh, LEARNER_WIDTH, LEARNER_WIDTH]),
            bias2: Tensor::zeros(&[LEARNER_WIDTH]),
            head: Tensor::zeros(&[LEARNER_WIDTH, outputs]),
            head_bias: Tensor::zeros(&[outputs]),
        }
    }

    /// Rebuilds a learner from tensors in [`IndexLearner::params`] order.
    pub fn from_params(mut params: Vec<Tensor>) -> Result<Self> {
        if params.len() != 6 {
            return Err(NesError::config("index learner needs 6 parameter tensors"));
        }
        let head_bias = params.pop().unwrap();
        let head = params.pop().unwrap();
        let bias2 = params.pop().unwrap();
        let conv2 = params.pop().unwrap();
        let bias1 = params.pop().unwrap();
        let conv1 = params.pop().unwrap();
        let l = IndexLearner {
            conv1,
            bias1,
            conv2,
            bias2,
            head,
            head_bias,
        };
        l.check_shapes()?;
        Ok(l)
    }

    fn check_shapes(&self) -> Result<()> {
        let c1 = self.conv1.shape();
        let ok = c1.len() == 4
            && c1[0] == 3
            && c1[3] == LEARNER_WIDTH
            && self.conv2.shape() == [3, c1[1], LEARNER_WIDTH, LEARNER_WIDTH]
            && self.bias1.shape() == [LEARNER_WIDTH]
            && self.bias2.shape() == [LEARNER_WIDTH]
            && self.head.rank() == 2
            && self.head.shape()[0] == LEARNER_WIDTH
            && self.head_bias.shape() == [self.head.shape()[1]];
        if !ok {
            return Err(NesError::config("inconsistent index learner parameter shapes"));
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        self.head.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.shape()[2]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1,
            &self.bias1,
            &self.conv2,
            &self.bias2,
            &self.head,
            &self.head_bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1,
            &mut self.bias1,
            &mut self.conv2,
            &mut self.bias2,
            &mut self.head,
            &mut self.head_bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(NesError::config("flat learner parameter length mismatch"));
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<LearnerTrace> {
        if input.rank() != 3 || input.shape()[2] != self.in_channels() {
            return Err(NesError::DimensionMismatch {
                op: "index learner input",
                left: input.shape().to_vec(),
                right: vec![self.in_channels()],
            });
        }
        let mut act1 = conv2d_naive(input, &self.conv1, LEARNER_GEOMETRY)?;
        add_bias_tanh(&mut act1, &self.bias1);
        let mut act2 = conv2d_naive(&act1, &self.conv2, LEARNER_GEOMETRY)?;
        add_bias_tanh(&mut act2, &self.bias2);
        let positions = (act2.len() / LEARNER_WIDTH) as f64;
        let mut pooled = vec![0.0; LEARNER_WIDTH];
        for (k, v) in act2.data().iter().enumerate() {
            pooled[k % LEARNER_WIDTH] += v;
        }
        pooled.iter_mut().for_each(|v| *v /= positions);
        let k_out = self.outputs();
        let output = (0..k_out)
            .map(|o| {
                let z = self.head_bias.data()[o]
                    + (0..LEARNER_WIDTH)
                        .map(|k| pooled[k] * self.head.data()[k * k_out + o])
                        .sum::<f64>();
                sigmoid(z)
            })
            .collect();
        Ok(LearnerTrace {
            input: input.clone(),
            act1,
            act2,
            pooled,
            output,
        })
    }

    /// Normalized indices in `(0, 1)`, one per routing-map entry.
    pub fn predict_indices(&self, input: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.output)
    }

    /// Backpropagates `d_output` (gradient w.r.t. the sigmoid outputs).
    pub fn backward(&self, trace: &LearnerTrace, d_output: &[f64]) -> Result<LearnerGrads> {
        let k_out = self.outputs();
        if d_output.len() != k_out {
            return Err(NesError::DimensionMismatch {
                op: "index learner backward",
                left: vec![d_output.len()],
                right: vec![k_out],
            });
        }
        let d_logit: Vec<f64> = d_output
            .iter()
            .zip(&trace.output)
            .map(|(g, y)| g * y * (1.0 - y))
            .collect();
        let mut d_head = Tensor::zeros(&[LEARNER_WIDTH, k_out]);
        let mut d_pooled = [0.0; LEARNER_WIDTH];
        for (k, dp) in d_pooled.iter_mut().enumerate() {
            for (o, &dl) in d_logit.iter().enumerate() {
                d_head.data_mut()[k * k_out + o] = trace.pooled[k] * dl;
                *dp += self.head.data()[k * k_out + o] * dl;
            }
        }
        let d_head_bias = Tensor::new(vec![k_out], d_logit)?;

        let positions = (trace.act2.len() / LEARNER_WIDTH) as f64;
        let mut dz2 = trace.act2.clone();
        let mut d_bias2 = Tensor::zeros(&[LEARNER_WIDTH]);
        for (k, v) in dz2.data_mut().iter_mut().enumerate() {
            let c = k % LEARNER_WIDTH;
            *v = d_pooled[c] / positions * (1.0 - *v * *v);
            d_bias2.data_mut()[c] += *v;
        }
        let (d_act1, d_conv2) =
            conv2d_backward(&trace.act1, &self.conv2, LEARNER_GEOMETRY, &dz2)?;

        let mut dz1 = d_act1;
        let mut d_bias1 = Tensor::zeros(&[LEARNER_WIDTH]);
        for (k, (g, a)) in dz1
            .data_mut()
            .iter_mut()
            .zip(trace.act1.data())
            .enumerate()
        {
            *g *= 1.0 - a * a;
            d_bias1.data_mut()[k % LEARNER_WIDTH] += *g;
        }
        let (d_input, d_conv1) =
            conv2d_backward(&trace.input, &self.conv1, LEARNER_GEOMETRY, &dz1)?;
        Ok(LearnerGrads {
            params: vec![d_conv1, d_bias1, d_conv2, d_bias2, d_head, d_head_bias],
            input: d_input,
        })
    }
}

fn below(limit: f64) -> f64 {
    f64::from_bits(limit.to_bits() - 1)
}

/// Scales normalized outputs onto epitome coordinates. Spatial entries are
/// multiplied by `(W^E, H^E)`; channel and filter entries by the number of
/// super-index groups `C^E / l_g` and then by `l_g`. Disabled axes yield 0.
/// A saturated sigmoid (exactly 1.0) is pulled just below the axis length.
pub fn scale_indices(normalized: &[f64], plan: &LayerPlan) -> Result<IndexSet> {
    if normalized.len() != plan.index_count() {
        return Err(NesError::config(format!(
            "expected {} normalized indices, got {}",
            plan.index_count(),
            normalized.len()
        )));
    }
    let e = plan.epitome;
    let cfg = SuperIndexConfig::from(plan);
    let scale_group = |n: f64, len: usize, group: usize| {
        let groups = len as f64 / group as f64;
        (n * groups) * group as f64
    };
    let mut flat = Vec::with_capacity(normalized.len());
    for (k, &n) in normalized.iter().enumerate() {
        if !(0.0..=1.0).contains(&n) {
            return Err(NesError::config(format!("normalized index {n} outside [0, 1]")));
        }
        let (v, limit) = if k < 3 * plan.r_cin() {
            match k % 3 {
                0 if plan.sampling.spatial => (n * e.w as f64, e.w),
                1 if plan.sampling.spatial => (n * e.h as f64, e.h),
                2 if plan.sampling.channel => (scale_group(n, e.c_in, cfg.group_in), e.c_in),
                _ => (0.0, 1),
            }
        } else if plan.sampling.filter {
            (scale_group(n, e.c_out, cfg.group_out), e.c_out)
        } else {
            (0.0, 1)
        };
        let limit = limit as f64;
        flat.push(if v >= limit { below(limit) } else { v });
    }
    IndexSet::from_flat(plan, &flat)
}

/// `d start / d normalized` for every flat entry (diagonal Jacobian of
/// [`scale_indices`]).
pub fn scale_jacobian(plan: &LayerPlan) -> Vec<f64> {
    let e = plan.epitome;
    let mut j = Vec::with_capacity(plan.index_count());
    for _ in 0..plan.r_cin() {
        let sp = if plan.sampling.spatial { 1.0 } else { 0.0 };
        let ch = if plan.sampling.channel { 1.0 } else { 0.0 };
        j.extend([sp * e.w as f64, sp * e.h as f64, ch * e.c_in as f64]);
    }
    let f = if plan.sampling.filter { e.c_out as f64 } else { 0.0 };
    j.extend(std::iter::repeat_n(f, plan.r_cout()));
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epitome::Shape4;

    #[test]
    fn zero_learner_outputs_one_half() {
        let l = IndexLearner::zeros(3, true, 9);
        let mut rng = Rng::new(1);
        let f = Tensor::randn(&[6, 6, 3], 1.0, &mut rng);
        let y = l.predict_indices(&f).unwrap();
        assert_eq!(y.len(), 9);
        assert!(y.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn output_count_follows_plan() {
        let plan = LayerPlan::new(Shape4::new(3, 3, 8, 12), Shape4::new(3, 3, 4, 4)).unwrap();
        assert_eq!((plan.r_cin(), plan.r_cout()), (2, 3));
        let mut rng = Rng::new(2);
        let l = IndexLearner::new(8, true, plan.index_count(), &mut rng);
        let f = Tensor::randn(&[5, 5, 8], 1.0, &mut rng);
        let y = l.predict_indices(&f).unwrap();
        assert_eq!(y.len(), 9);
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_wrong_input_channels() {
        let l = IndexLearner::zeros(3, true, 4);
        assert!(l.forward(&Tensor::zeros(&[4, 4, 2])).is_err());
    }

    #[test]
    fn scaling_arithmetic() {
        let plan = LayerPlan::new(Shape4::new(1, 1, 8, 8), Shape4::new(16, 16, 8, 8))
            .unwrap()
            .with_groups(4, 8)
            .unwrap();
        let n = [0.5, 0.5, 0.5, 0.0];
        let idx = scale_indices(&n, &plan).unwrap();
        assert_eq!(idx.input[0][0], 8.0);
        assert_eq!(idx.input[0][2], 4.0);
        assert_eq!(idx.filter[0], 0.0);
    }

    #[test]
    fn saturated_sigmoid_stays_in_range() {
        let plan = LayerPlan::new(Shape4::new(3, 3, 4, 4), Shape4::new(3, 3, 4, 4)).unwrap();
        let idx = scale_indices(&[1.0; 4], &plan).unwrap();
        assert!(idx.input[0][0] < 3.0);
        assert!(idx.validate(&plan).is_ok());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = Rng::new(3);
        let l = IndexLearner::new(2, false, 5, &mut rng);
        let mut m = IndexLearner::zeros(2, false, 5);
        m.set_flat_params(&l.flat_params()).unwrap();
        assert_eq!(l, m);
        let rebuilt = IndexLearner::from_params(l.params().into_iter().cloned().collect()).unwrap();
        assert_eq!(rebuilt, l);
    }
}
