//! The training loop: batch forward through expanded weights, softmax
//! cross-entropy, backpropagation into epitomes and learners, SGD, and
//! routing-map updates, followed by an audit of the frozen model.

use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, ExperimentConfig, IndexMode};
use crate::data::{generate_dataset, ingest_idx, Dataset, SyntheticKind};
use crate::error::{NesError, Result};
use crate::model::{
    apply_sgd, argmax, backward_batch, forward_batch, softmax_cross_entropy, ForwardIndices, Layer, Model,
};
use crate::routing::RoutingMap;
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Comparison of the training-time forward pass after the last step with
/// learner-free inference from the frozen model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub index_mode: IndexMode,
    /// Largest `|train - infer|` over the audited outputs, relative to
    /// `max(1, max |train|)`.
    pub max_output_gap: f64,
    /// Largest `|fresh - map|` over all index entries (0 without learners).
    pub max_index_drift: f64,
    pub audited_samples: usize,
    /// Accuracy of learner-free inference over the whole training set.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Frozen model, learners still attached.
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
    pub audit: AuditReport,
}

impl TrainOutcome {
    /// One JSON object per line; identical configs give identical bytes.
    pub fn metrics_jsonl(&self) -> String {
        self.metrics
            .iter()
            .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
            .collect()
    }
}

pub fn load_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    match cfg {
        DatasetConfig::Blobs2d { samples, noise } => generate_dataset(SyntheticKind::Blobs2d, seed, *samples, *noise),
        DatasetConfig::Waves1d { samples, noise } => generate_dataset(SyntheticKind::Waves1d, seed, *samples, *noise),
        DatasetConfig::Idx { images, labels } => ingest_idx(images, labels),
    }
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = load_dataset(&cfg.dataset, cfg.seed)?;
    train_on(cfg, &data)
}

fn batch(data: &Dataset, order: &[usize]) -> (Vec<Tensor>, Vec<usize>) {
    (
        order.iter().map(|&i| data.inputs[i].clone()).collect(),
        order.iter().map(|&i| data.labels[i]).collect(),
    )
}

fn set_maps(model: &mut Model, indices: &[Option<crate::epitome::IndexSet>], momentum: f64) -> Result<()> {
    let mut it = indices.iter();
    for l in &mut model.layers {
        if let Layer::Epitome(e) = l {
            if let Some(Some(idx)) = it.next() {
                e.map = RoutingMap::from_indices(&e.plan, idx)?.with_momentum(momentum)?;
            } else {
                e.map = e.map.clone().with_momentum(momentum)?;
            }
        }
    }
    Ok(())
}

fn update_maps(model: &mut Model, indices: &[Option<crate::epitome::IndexSet>]) -> Result<()> {
    let mut it = indices.iter();
    for l in &mut model.layers {
        if let Layer::Epitome(e) = l {
            if let Some(Some(idx)) = it.next() {
                e.map.update(idx)?;
            }
        }
    }
    Ok(())
}

/// Trains on `data`. Routing maps start at the first batch's fresh indices.
pub fn train_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shape = data
        .input_shape()
        .ok_or_else(|| NesError::config("training set is empty"))?
        .to_vec();
    let mut rng = Rng::new(cfg.seed);
    let mut init_rng = rng.fork(1);
    let mut order_rng = rng.fork(2);
    let mut model = Model::from_config(&cfg.model, &shape, cfg.wrap, &mut init_rng)?;
    let out = model.output_shape()?;
    if out != [data.classes] {
        return Err(NesError::config(format!(
            "model emits {out:?} but the dataset has {} classes",
            data.classes
        )));
    }

    let n = data.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order_rng.shuffle(&mut order);
    let mut cursor = 0;
    let mut next_batch = |order: &mut Vec<usize>| {
        if cursor + bs > n {
            order_rng.shuffle(order);
            cursor = 0;
        }
        let b = order[cursor..cursor + bs].to_vec();
        cursor += bs;
        b
    };

    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut last = next_batch(&mut order);
    {
        let (xs, _) = batch(data, &last);
        let seed_trace = forward_batch(&mut model, &xs, ForwardIndices::Train(IndexMode::Fresh))?;
        set_maps(&mut model, &seed_trace.fresh_indices(), cfg.momentum)?;
    }
    for step in 0..cfg.steps {
        if step > 0 {
            last = next_batch(&mut order);
        }
        let (xs, ys) = batch(data, &last);
        let trace = forward_batch(&mut model, &xs, ForwardIndices::Train(cfg.index_mode))?;
        let (loss, d_logits) = softmax_cross_entropy(trace.outputs(), &ys)?;
        if !loss.is_finite() {
            return Err(NesError::NonFinite(format!("loss {loss} at step {step}")));
        }
        let correct = trace.outputs().iter().zip(&ys).filter(|(z, &y)| argmax(z) == y).count();
        let grads = backward_batch(&model, &trace, d_logits, cfg.index_mode)?;
        apply_sgd(&mut model, &grads, cfg.learning_rate)?;
        if cfg.index_mode == IndexMode::Fresh {
            update_maps(&mut model, &trace.fresh_indices())?;
        }
        metrics.push(StepMetrics {
            step,
            loss,
            accuracy: correct as f64 / ys.len() as f64,
        });
    }

    let (xs, _) = batch(data, &last);
    let audit_mode = match cfg.index_mode {
        IndexMode::Ema => ForwardIndices::Map,
        IndexMode::Fresh => ForwardIndices::Train(IndexMode::Fresh),
    };
    let trace = forward_batch(&mut model, &xs, audit_mode)?;
    let mut drift = 0.0f64;
    for (fresh, e) in trace.fresh_indices().iter().zip(model.epitome_layers()) {
        if let Some(f) = fresh {
            for (a, b) in f.to_flat().iter().zip(e.map.entries()) {
                drift = drift.max((a - b).abs());
            }
        }
    }
    model.freeze();
    let mut frozen = model.clone();
    frozen.strip_learners();
    let mut gap = 0.0f64;
    for (x, want) in xs.iter().zip(trace.outputs()) {
        let (got, _) = frozen.infer(x)?;
        gap = gap.max(got.max_abs_diff(want)? / want.max_abs().max(1.0));
    }
    let mut correct = 0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        if argmax(&frozen.infer(x)?.0) == y {
            correct += 1;
        }
    }
    let audit = AuditReport {
        index_mode: cfg.index_mode,
        max_output_gap: gap,
        max_index_drift: drift,
        audited_samples: xs.len(),
        train_accuracy: correct as f64 / n as f64,
    };
    Ok(TrainOutcome { model, metrics, audit })
}
