use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{forward_on_tape, ForwardOptions};
use super::params::ModelParams;
use super::ModelConfig;
use crate::alignment::FeatureVolume;
use crate::error::{AtaError, Result};
use crate::numerics::{Tape, Tensor};
use crate::synthdata::{MotionDataset, SyntheticClip};

pub const MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub clip: FeatureVolume,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl Dataset {
    pub fn from_motion(data: &MotionDataset) -> Result<Self> {
        let convert = |clips: &[SyntheticClip]| -> Result<Vec<Example>> {
            clips
                .iter()
                .map(|c| {
                    let label = c
                        .label
                        .ok_or_else(|| AtaError::invalid("motion clip without a label"))?;
                    Ok(Example {
                        clip: c.volume.clone(),
                        label,
                    })
                })
                .collect()
        };
        Ok(Self {
            train: convert(&data.train)?,
            val: convert(&data.val)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch, each clip measured before its update.
    pub loss: f64,
    pub train_acc: f64,
    /// `None` when the validation split is empty.
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct ClipStep {
    loss: f64,
    correct: bool,
    grads: Vec<Tensor>,
}

fn clip_step(ex: &Example, flat: &[Tensor], template: &ModelParams, config: &ModelConfig) -> Result<ClipStep> {
    let mut tape = Tape::new();
    let vars: Vec<_> = flat.iter().map(|t| tape.param(t.clone())).collect();
    let pv = template.with_values(vars.clone())?;
    let out = forward_on_tape(&mut tape, &ex.clip, &pv, config, &ForwardOptions::default())?;
    let correct = argmax(tape.value(out.logits).data()) == ex.label;
    let loss = tape.cross_entropy(out.logits, &[ex.label])?;
    let grads = tape.backward(loss)?;
    Ok(ClipStep {
        loss: tape.value(loss).item(),
        correct,
        grads: vars
            .iter()
            .zip(flat)
            .map(|(v, t)| grads.get_or_zeros(*v, t))
            .collect(),
    })
}

/// Fraction of `examples` whose arg-max logit equals the label.
pub fn evaluate(examples: &[Example], params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    if examples.is_empty() {
        return Err(AtaError::invalid("no examples to evaluate"));
    }
    let hits: Vec<bool> = examples
        .par_iter()
        .map(|ex| {
            let logits = super::forward_classifier(&ex.clip, params, config)?;
            Ok(argmax(&logits) == ex.label)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

/// SGD with momentum on mean cross-entropy; see [`train_with`].
pub fn train(data: &Dataset, config: &ModelConfig, hyper: &TrainHyper) -> Result<TrainOutcome> {
    train_with(data, config, hyper, |_| {})
}

/// Trains from the seeded initialisation of `config`, calling `on_epoch` after each
/// epoch. Clips of a batch run in parallel; gradients are summed in batch order,
/// so results do not depend on the thread count.
pub fn train_with(
    data: &Dataset,
    config: &ModelConfig,
    hyper: &TrainHyper,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(AtaError::invalid("training split is empty"));
    }
    if hyper.batch == 0 {
        return Err(AtaError::invalid("batch size must be positive"));
    }
    if !(hyper.lr >= 0.0 && hyper.lr.is_finite()) {
        return Err(AtaError::invalid(format!("invalid learning rate {}", hyper.lr)));
    }
    if let Some(bad) = data
        .train
        .iter()
        .chain(&data.val)
        .find(|e| e.label >= config.classes)
    {
        return Err(AtaError::invalid(format!(
            "label {} out of range for {} classes",
            bad.label, config.classes
        )));
    }

    let template = ModelParams::init(config)?;
    let mut flat: Vec<Tensor> = template.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut velocity: Vec<Tensor> = flat.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut metrics = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; data.train.len()];
        let mut correct = 0usize;
        for batch in order.chunks(hyper.batch) {
            let steps: Vec<ClipStep> = batch
                .par_iter()
                .map(|&i| clip_step(&data.train[i], &flat, &template, config))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            for (pi, (p, v)) in flat.iter_mut().zip(&mut velocity).enumerate() {
                let mut g = vec![0.0; p.numel()];
                for s in &steps {
                    for (a, b) in g.iter_mut().zip(s.grads[pi].data()) {
                        *a += b;
                    }
                }
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(&g) {
                    *vv = MOMENTUM * *vv + gv * scale;
                    *pv -= hyper.lr * *vv;
                }
            }
            for (&i, s) in batch.iter().zip(&steps) {
                losses[i] = s.loss;
                correct += s.correct as usize;
            }
        }
        let params = template.with_values(flat.clone())?;
        let val_acc = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(&data.val, &params, config)?)
        };
        let m = EpochMetrics {
            epoch,
            loss: losses.iter().sum::<f64>() / data.train.len() as f64,
            train_acc: correct as f64 / data.train.len() as f64,
            val_acc,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome {
        params: template.with_values(flat)?,
        metrics,
    })
}
