//! Minibatch training with per-group Adam, and evaluation at weighted steps.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::metrics::{auprc, auprc_macro, rmse};
use super::{HarnessError, Result};
use crate::models::{Dims, Model, ModelConfig, TaskSpec};
use crate::preprocess::{make_batches, Batch, Dataset};
use crate::tensor::{Adam, AdamConfig};

pub const HISTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluation uses contiguous chunks of this size, so metrics do not
    /// depend on the training shuffle.
    pub eval_batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Held-out fraction for `train` runs outside cross-validation.
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            eval_batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Rmse,
    Auprc,
    AuprcMacro,
}

impl MetricKind {
    pub fn for_task(task: TaskSpec) -> Self {
        match task {
            TaskSpec::Regression => MetricKind::Rmse,
            TaskSpec::Binary => MetricKind::Auprc,
            TaskSpec::Multiclass { .. } => MetricKind::AuprcMacro,
        }
    }

    pub fn lower_is_better(self) -> bool {
        self == MetricKind::Rmse
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Rmse => "rmse",
            MetricKind::Auprc => "auprc",
            MetricKind::AuprcMacro => "auprc_macro",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Weighted mean training loss; epoch 0 is measured before any update.
    pub train_loss: f64,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub schema_version: u32,
    pub metric: MetricKind,
    pub records: Vec<EpochRecord>,
}

/// Predictions gathered at every positive-weight step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric: MetricKind,
    pub value: f64,
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn dims_of(ds: &Dataset) -> Dims {
    Dims::new(ds.n_features, ds.n_context)
}

fn chunks(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    let size = size.max(1);
    (0..n).step_by(size).map(move |s| (s..(s + size).min(n)).collect())
}

/// Weighted mean loss over the whole dataset.
pub fn dataset_loss(model: &Model, ds: &Dataset, eval_batch_size: usize) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for idx in chunks(ds.len(), eval_batch_size) {
        let batch = Batch::new(ds, &idx);
        let w = batch.weights_step_major().sum();
        if w > 0.0 {
            num += model.loss_value(&batch)? * w;
            den += w;
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

pub fn metric_value(metric: MetricKind, scores: &[Vec<f64>], labels: &[f64], weights: &[f64]) -> Result<f64> {
    Ok(match metric {
        MetricKind::Rmse => rmse(&scores.iter().map(|s| s[0]).collect::<Vec<_>>(), labels, weights)?,
        MetricKind::Auprc => auprc(&scores.iter().map(|s| s[0]).collect::<Vec<_>>(), labels, weights)?,
        MetricKind::AuprcMacro => {
            let ids: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
            auprc_macro(scores, &ids, weights)?
        }
    })
}

pub fn evaluate(model: &Model, ds: &Dataset, eval_batch_size: usize) -> Result<Evaluation> {
    let width = model.task().output_width();
    let (mut scores, mut labels, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for idx in chunks(ds.len(), eval_batch_size) {
        let batch = Batch::new(ds, &idx);
        let pred = model.predict(&batch)?;
        let b = batch.len();
        for step in 0..ds.seq_len {
            for (j, s) in batch.subjects.iter().enumerate() {
                if s.weights[step] > 0.0 {
                    let row = step * b + j;
                    scores.push(pred.data()[row * width..(row + 1) * width].to_vec());
                    labels.push(s.labels[step]);
                    weights.push(s.weights[step]);
                }
            }
        }
    }
    let metric = crate::harness::MetricKind::for_task(model.task());
    let value = metric_value(metric, &scores, &labels, &weights)?;
    Ok(Evaluation {
        metric,
        value,
        scores,
        labels,
        weights,
    })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Trains `model` in place.
pub fn train_model(model: &mut Model, train: &Dataset, val: Option<&Dataset>, tc: &TrainConfig) -> Result<History> {
    let metric = MetricKind::for_task(model.task());
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: dataset_loss(model, train, tc.eval_batch_size)?,
        val_metric: val.map(|v| evaluate(model, v, tc.eval_batch_size)).transpose()?.map(|e| e.value),
    }];
    let mut adam = Adam::new(tc.adam, model.params());
    for epoch in 1..=tc.epochs {
        let (mut num, mut den) = (0.0, 0.0);
        for (bi, idx) in make_batches(train.len(), tc.batch_size, epoch_seed(tc.seed, epoch))?
            .into_iter()
            .enumerate()
        {
            let batch = Batch::new(train, &idx);
            let (loss, grads) = model.loss_and_grads(&batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(HarnessError::Divergence { epoch, batch: bi });
            }
            let w = batch.weights_step_major().sum();
            num += loss * w;
            den += w;
            adam.step(model.params_mut(), &grads)?;
        }
        let train_loss = if den > 0.0 { num / den } else { 0.0 };
        debug!("epoch {epoch}: train loss {train_loss:.6}");
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_metric: None,
        });
    }
    if tc.epochs > 0 {
        if let Some(v) = val {
            records.last_mut().expect("non-empty").val_metric = Some(evaluate(model, v, tc.eval_batch_size)?.value);
        }
    }
    let last = records.last().expect("non-empty");
    info!(
        "trained {} epochs: loss {:.6} -> {:.6}",
        tc.epochs, records[0].train_loss, last.train_loss
    );
    Ok(History {
        schema_version: HISTORY_SCHEMA_VERSION,
        metric,
        records,
    })
}

/// Builds a model seeded with `tc.seed` and trains it.
pub fn train(config: ModelConfig, task: TaskSpec, train: &Dataset, val: Option<&Dataset>, tc: &TrainConfig) -> Result<(Model, History)> {
    let mut model = Model::new(config, task, dims_of(train), tc.seed)?;
    let history = train_model(&mut model, train, val, tc)?;
    Ok((model, history))
}
