//! Training loop (SGD with optional momentum), evaluation, and reports.

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{forward, loss_and_grads, DenseModel, ForwardMode, Grads};
use crate::pool;
use crate::rng::substream;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd_momentum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Training hyperparameters. `seed` drives batch shuffling only; model
/// initialization has its own seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {}", self.momentum)));
        }
        Ok(())
    }
}

/// Loss trace and final accuracy of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per epoch over the training split.
    pub epoch_loss: Vec<f64>,
    /// Accuracy on the dataset's test split after the last epoch, evaluated
    /// in the model's natural mode.
    pub final_accuracy: f64,
}

struct MomentumState {
    layers: Vec<(Vec<f64>, Vec<f64>, Option<(Vec<f64>, Vec<f64>)>)>,
}

impl MomentumState {
    fn like(model: &DenseModel) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| {
                (
                    vec![0.0; l.weight.numel()],
                    vec![0.0; l.bias.numel()],
                    l.adapter
                        .as_ref()
                        .map(|a| (vec![0.0; a.a.numel()], vec![0.0; a.b.numel()])),
                )
            })
            .collect();
        Self { layers }
    }
}

fn axpy_update(param: &mut Tensor, grad: &Tensor, velocity: &mut [f64], lr: f64, mu: f64) {
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.iter_mut())
    {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

fn apply_step(model: &mut DenseModel, grads: &Grads, state: &mut MomentumState, lr: f64, mu: f64) {
    for ((layer, lg), vs) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.layers)
    {
        if !layer.frozen {
            axpy_update(&mut layer.weight, &lg.weight, &mut vs.0, lr, mu);
            axpy_update(&mut layer.bias, &lg.bias, &mut vs.1, lr, mu);
        }
        if let (Some(adapter), Some((ga, gb)), Some((va, vb))) =
            (&mut layer.adapter, &lg.adapter, &mut vs.2)
        {
            axpy_update(&mut adapter.a, ga, va, lr, mu);
            axpy_update(&mut adapter.b, gb, vb, lr, mu);
        }
    }
}

/// Train all non-frozen parameters and adapters. Deterministic in
/// (model, data, hyper): the only randomness is the shuffle substream.
pub fn train(model: &mut DenseModel, data: &Dataset, hyper: &Hyper) -> Result<TrainReport> {
    hyper.validate()?;
    model.validate()?;
    if !model.has_trainable_params() {
        return Err(Error::Config(
            "no trainable parameters: all layers frozen and no adapters attached".into(),
        ));
    }
    if data.train.len() == 0 {
        return Err(Error::Argument("empty training split".into()));
    }
    train_on_split(model, &data.train, data, hyper)
}

/// Train using an explicit subset of the training split (used by selection).
pub fn train_on_split(
    model: &mut DenseModel,
    split: &Split,
    data: &Dataset,
    hyper: &Hyper,
) -> Result<TrainReport> {
    hyper.validate()?;
    if split.len() == 0 {
        return Err(Error::Argument("empty training split".into()));
    }
    let mode = model.natural_mode();
    let mu = match hyper.optimizer {
        OptimizerKind::Sgd => 0.0,
        OptimizerKind::SgdMomentum => hyper.momentum,
    };
    let mut state = MomentumState::like(model);
    let mut shuffle_rng = substream(hyper.seed, "train.shuffle");
    let mut order: Vec<usize> = (0..split.len()).collect();
    let mut epoch_loss = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch = split.batch(chunk)?;
            let (loss, grads) = loss_and_grads(model, &batch, mode)?;
            total += loss * batch.len() as f64;
            if hyper.lr != 0.0 {
                apply_step(model, &grads, &mut state, hyper.lr, mu);
            }
        }
        epoch_loss.push(total / split.len() as f64);
    }
    let final_accuracy = evaluate(model, &data.test, mode)?;
    Ok(TrainReport {
        epoch_loss,
        final_accuracy,
    })
}

/// Accuracy under argmax of logits, ties broken by lowest class index.
/// Batches are evaluated in parallel with a fixed reduction order.
pub fn evaluate(model: &DenseModel, split: &Split, mode: ForwardMode) -> Result<f64> {
    if split.len() == 0 {
        return Err(Error::Argument("empty evaluation dataset".into()));
    }
    model.validate()?;
    let n = split.len();
    let chunk = 256usize;
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let counts: Result<Vec<u64>> = pool::install(|| {
        starts
            .par_iter()
            .map(|&start| {
                let idxs: Vec<usize> = (start..(start + chunk).min(n)).collect();
                let batch = split.batch(&idxs)?;
                let logits = forward(model, &batch, mode)?;
                let classes = logits.cols();
                let mut correct = 0u64;
                for (row, &label) in batch.labels.iter().enumerate() {
                    let lrow = logits.row(row);
                    let mut best = 0usize;
                    for (j, &v) in lrow.iter().enumerate().take(classes) {
                        if v > lrow[best] {
                            best = j;
                        }
                    }
                    if best == label {
                        correct += 1;
                    }
                }
                Ok(correct)
            })
            .collect()
    });
    let correct: u64 = counts?.iter().sum();
    Ok(correct as f64 / n as f64)
}
