//! Learning-rate sweep with validation-based model selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{LossMode, TrainingConfig};
use super::data::Split;
use super::PipelineError;
use crate::eval::{confusion, prf1};
use crate::exec;
use crate::loss::{ace_loss_on_tape, PhaseTarget};
use crate::model::{build, predict, CheckpointMeta, GateMode, ModelCheckpoint, ModelConfig, Network, PhaseLabel};
use crate::rng;
use crate::tensor::{adam_step, AdamState, Tape, Tensor};

pub const TRAIN_LOG_SCHEMA: &str = "phase-curator/train-log";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub learning_rate: f64,
    pub epoch: u32,
    pub samples: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    /// Mean cross entropy of the reference phases on the validation set.
    pub val_loss: f64,
    /// Best validation score so far across the whole sweep.
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub learning_rate: f64,
    pub log: Vec<EpochRecord>,
}

/// Training targets implied by mined labels under `mode`, with the indices
/// of the scans they belong to.
pub fn training_targets(split: &Split, mode: LossMode) -> Vec<(usize, PhaseTarget)> {
    split
        .scans
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.mined.target()))
        .filter(|(_, t)| mode == LossMode::Ace || !t.is_coarse())
        .collect()
}

fn sample_gradient(net: &Network<f32>, input: &Tensor<f32>, target: PhaseTarget) -> Result<(f64, Vec<Tensor<f32>>), PipelineError> {
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let batch = input.clone().reshape(&shape)?;
    let mut tape = Tape::new();
    let rec = net.record(&mut tape, batch, true, false, GateMode::Learned)?;
    let loss = ace_loss_on_tape(&mut tape, rec.logits, &[target])?;
    let value = tape.value(loss)?.item() as f64;
    tape.backward(loss)?;
    let grads = rec
        .params
        .iter()
        .map(|&v| Ok(tape.take_grad(v)?.expect("parameters require grad")))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok((value, grads))
}

/// Predicted phases for every scan of a split.
pub fn predict_split(ckpt: &ModelCheckpoint, split: &Split) -> Result<Vec<PhaseLabel>, PipelineError> {
    exec::map(&split.inputs, |x| predict(ckpt, x).map(|(p, _)| p))
        .into_iter()
        .map(|r| r.map_err(PipelineError::from))
        .collect()
}

/// Validation macro F1 and mean cross entropy against the reference phases.
fn validate(ckpt: &ModelCheckpoint, split: &Split) -> Result<(f64, f64), PipelineError> {
    if split.is_empty() {
        return Ok((0.0, 0.0));
    }
    let out = exec::map(&split.inputs, |x| predict(ckpt, x))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let truth = split.reference();
    let pred: Vec<PhaseLabel> = out.iter().map(|(p, _)| *p).collect();
    let loss = out.iter().zip(&truth).map(|((_, p), t)| -p[t.code()].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / truth.len() as f64;
    Ok((prf1(&confusion(&pred, &truth)?).macro_f1, loss))
}

/// Train one model per learning rate and keep the epoch with the best
/// validation macro F1. Ties go to the lower validation cross entropy, then
/// to the earlier epoch. Every rate starts from the same
/// initialisation, and each epoch visits the samples in a seeded order.
pub fn train(model: &ModelConfig, cfg: &TrainingConfig, train: &Split, val: &Split) -> Result<TrainOutcome, PipelineError> {
    let targets = training_targets(train, cfg.loss_mode);
    if targets.is_empty() {
        return Err(PipelineError::Data("training set is empty".into()));
    }
    let init = build(model, cfg.seed)?;
    let mut best: Option<(f64, f64, f64, ModelCheckpoint)> = None;
    let mut log = Vec::new();

    for (li, &lr) in cfg.learning_rates.iter().enumerate() {
        let mut net = init.network.clone();
        let mut adam = AdamState::default();
        let mut lr_best = (f64::NEG_INFINITY, f64::INFINITY);
        let mut stale = 0;
        for epoch in 1..=cfg.max_epochs as u32 {
            let mut order = targets.clone();
            order.shuffle(&mut rng::stream(&[cfg.seed, li as u64, epoch as u64]));
            let mut loss_sum = 0.0;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let per_sample = exec::map(batch, |&(i, t)| sample_gradient(&net, &train.inputs[i], t));
                let mut grads: Vec<Tensor<f32>> = net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                let mut batch_loss = 0.0;
                for r in per_sample {
                    let (l, g) = r?;
                    batch_loss += l;
                    for (acc, g) in grads.iter_mut().zip(g) {
                        acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &v)| *a += v);
                    }
                }
                if !batch_loss.is_finite() {
                    return Err(PipelineError::NonFinite {
                        learning_rate: lr,
                        epoch,
                        batch: b,
                    });
                }
                let scale = 1.0 / batch.len() as f32;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
                adam_step(&mut net.params, &grads, &mut adam, lr, cfg.beta1, cfg.beta2, cfg.epsilon)?;
                loss_sum += batch_loss;
            }

            let ckpt = ModelCheckpoint {
                network: net.clone(),
                meta: CheckpointMeta {
                    seed: cfg.seed,
                    epoch,
                    val_metric: 0.0,
                },
            };
            let (f1, val_loss) = validate(&ckpt, val)?;
            let selected = best.as_ref().is_none_or(|(m, l, _, _)| f1 > *m || (f1 == *m && val_loss < *l));
            if selected {
                let mut ckpt = ckpt;
                ckpt.meta.val_metric = f1;
                best = Some((f1, val_loss, lr, ckpt));
            }
            log.push(EpochRecord {
                learning_rate: lr,
                epoch,
                samples: order.len(),
                train_loss: loss_sum / order.len() as f64,
                val_macro_f1: f1,
                val_loss,
                selected,
            });
            if f1 > lr_best.0 || (f1 == lr_best.0 && val_loss < lr_best.1) {
                lr_best = (f1, val_loss);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let (_, _, learning_rate, checkpoint) = best.ok_or_else(|| PipelineError::Config("max-epochs must be >= 1".into()))?;
    Ok(TrainOutcome {
        checkpoint,
        learning_rate,
        log,
    })
}
