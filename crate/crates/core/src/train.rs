//! Training loop with class-balanced sampling, session-level validation
//! split, and best-checkpoint selection by validation macro F1.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Axis, Graph, NamedTensor, Schedule};
use crate::corpus::MiscLabel;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::interpret::predicted_label;
use crate::metrics::{f1_scores, EvalReport};
use crate::modality::ModalityId;
use crate::model::{ForwardOptions, Inference, MaleficModel};

pub const VALIDATION_FRACTION: f64 = 0.2;
pub const BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Constant,
    Cosine,
    OneCycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub max_lr: f64,
    pub scheduler: SchedulerKind,
    pub optimizer: AdamW,
    pub batch_size: usize,
    pub modality_dropout: f64,
    pub seed: u64,
    /// Model modalities; `None` uses every modality the data carries.
    pub modalities: Option<Vec<ModalityId>>,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            max_lr: 2e-4,
            scheduler: SchedulerKind::Cosine,
            optimizer: AdamW::default(),
            batch_size: BATCH_SIZE,
            modality_dropout: crate::fusion::MODALITY_DROPOUT,
            seed: 0,
            modalities: None,
            validation_fraction: VALIDATION_FRACTION,
        }
    }
}

/// Names of the built-in training presets.
pub const PRESETS: [&str; 8] = [
    "multimodal-150",
    "text-150",
    "text-context-25",
    "audio-25",
    "face-150",
    "body-1500",
    "tiny",
    "paper-shapes",
];

impl TrainConfig {
    pub fn preset(name: &str) -> Option<Self> {
        use ModalityId::*;
        let d = Self::default();
        let with = |epochs, max_lr, scheduler, modalities: Option<Vec<ModalityId>>| Self {
            epochs,
            max_lr,
            scheduler,
            modalities,
            ..d.clone()
        };
        Some(match name {
            "multimodal-150" | "paper-shapes" => d.clone(),
            "text-150" => with(150, 2e-4, SchedulerKind::Cosine, Some(vec![Text])),
            "text-context-25" => with(
                25,
                2e-5,
                SchedulerKind::Constant,
                Some(vec![Text, ClientContext, TherapistContext]),
            ),
            "audio-25" => with(25, 1e-5, SchedulerKind::Constant, Some(vec![Audio])),
            "face-150" => with(150, 1e-4, SchedulerKind::OneCycle, Some(vec![Face])),
            "body-1500" => with(1500, 5e-5, SchedulerKind::Constant, Some(vec![Body])),
            "tiny" => with(
                30,
                3e-3,
                SchedulerKind::Cosine,
                Some(vec![Text, ClientContext, TherapistContext, Audio, Face]),
            ),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if !(self.max_lr > 0.0) || !self.max_lr.is_finite() {
            return Err(Error::Parameter(format!("max_lr {} must be positive", self.max_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) {
            return Err(Error::Parameter(format!("modality dropout {} outside [0, 1]", self.modality_dropout)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Parameter(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        if let Some(m) = &self.modalities {
            if m.is_empty() {
                return Err(Error::Parameter("empty modality subset".into()));
            }
        }
        Ok(())
    }

    pub fn schedule(&self, total_steps: usize) -> Schedule {
        match self.scheduler {
            SchedulerKind::Constant => Schedule::Constant { lr: self.max_lr },
            SchedulerKind::Cosine => Schedule::Cosine {
                max_lr: self.max_lr,
                total_steps,
            },
            SchedulerKind::OneCycle => Schedule::OneCycle {
                max_lr: self.max_lr,
                total_steps,
            },
        }
    }
}

/// Draws indices with probability proportional to `1 / count(class)`.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    cumulative: Vec<f64>,
}

impl WeightedSampler {
    pub fn new(labels: &[MiscLabel]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("labels for weighted sampling"));
        }
        let mut counts = [0usize; 3];
        for l in labels {
            counts[l.index()] += 1;
        }
        let mut acc = 0.0;
        let cumulative = labels
            .iter()
            .map(|l| {
                acc += 1.0 / counts[l.index()] as f64;
                acc
            })
            .collect();
        Ok(Self { cumulative })
    }

    pub fn draw(&self, rng: &mut dyn RngCore) -> usize {
        let total = *self.cumulative.last().expect("nonempty");
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

/// `n` indices drawn with replacement by [`WeightedSampler`].
pub fn weighted_sampler(labels: &[MiscLabel], n: usize, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    let s = WeightedSampler::new(labels)?;
    Ok((0..n).map(|_| s.draw(rng)).collect())
}

/// Splits by session: a shuffled `fraction` of the sessions (at least one
/// when there are two or more) goes to validation.
pub fn split_by_session(samples: Vec<Sample>, fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let sessions: BTreeSet<String> = samples.iter().map(|s| s.session.clone()).collect();
    let mut sessions: Vec<String> = sessions.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sessions.shuffle(&mut rng);
    let mut n_val = (sessions.len() as f64 * fraction).round() as usize;
    if fraction > 0.0 && n_val == 0 && sessions.len() > 1 {
        n_val = 1;
    }
    let val: BTreeSet<String> = sessions.into_iter().take(n_val).collect();
    samples.into_iter().partition(|s| !val.contains(&s.session))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_macro_f1: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
}

impl TrainOutcome {
    pub fn curve_csv(&self, header: &str) -> String {
        let mut out = header.to_string();
        out.push_str("epoch,lr,train_loss,train_macro_f1,val_loss,val_macro_f1\n");
        for r in &self.curve {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.lr, r.train_loss, r.train_macro_f1, r.val_loss, r.val_macro_f1
            );
        }
        out
    }
}

/// Keeps the samples that carry at least one model modality.
pub fn usable<'a>(model: &MaleficModel, samples: &'a [Sample]) -> Vec<&'a Sample> {
    samples
        .iter()
        .filter(|s| model.modalities().iter().any(|&m| s.inputs.available(m)))
        .collect()
}

/// Eval-mode inference for every sample, in order.
pub fn predict(model: &MaleficModel, samples: &[&Sample]) -> Result<Vec<Inference>> {
    samples.par_iter().map(|s| model.infer(&s.inputs, None)).collect()
}

fn loss_and_f1(samples: &[&Sample], results: &[Inference]) -> Result<(f64, f64)> {
    let loss = samples
        .iter()
        .zip(results)
        .map(|(s, r)| -r.class_probs[s.label.index()].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / samples.len() as f64;
    let preds: Vec<MiscLabel> = results.iter().map(|r| predicted_label(&r.class_probs)).collect();
    let labels: Vec<MiscLabel> = samples.iter().map(|s| s.label).collect();
    Ok((loss, f1_scores(&preds, &labels)?.macro_))
}

/// Eval-mode metrics with bootstrap intervals.
pub fn evaluate(model: &MaleficModel, samples: &[Sample], resamples: usize, seed: u64) -> Result<EvalReport> {
    let usable = usable(model, samples);
    let results = predict(model, &usable)?;
    let preds: Vec<MiscLabel> = results.iter().map(|r| predicted_label(&r.class_probs)).collect();
    let labels: Vec<MiscLabel> = usable.iter().map(|s| s.label).collect();
    EvalReport::compute(&preds, &labels, resamples, seed)
}

/// Trains `model` in place and leaves it holding the parameters of the epoch
/// with the best validation macro F1 (earliest on ties). Without validation
/// samples the last epoch is kept.
pub fn train(model: &mut MaleficModel, train: &[Sample], val: &[Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let train = usable(model, train);
    let val = usable(model, val);
    if train.is_empty() {
        return Err(Error::Empty("training samples carrying a model modality"));
    }
    model.set_modality_dropout(config.modality_dropout)?;
    let owned: Vec<Sample> = train.iter().map(|s| (*s).clone()).collect();
    model.fit_standardizers(&owned);

    let labels: Vec<MiscLabel> = train.iter().map(|s| s.label).collect();
    let sampler = WeightedSampler::new(&labels)?;
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let schedule = config.schedule(config.epochs * steps_per_epoch);
    schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut curve = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<NamedTensor>)> = None;
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let lr_epoch = schedule.lr(step);
        let mut loss_sum = 0.0;
        let mut preds = Vec::with_capacity(steps_per_epoch * config.batch_size);
        let mut truth = Vec::with_capacity(preds.capacity());
        for _ in 0..steps_per_epoch {
            let batch: Vec<usize> = (0..config.batch_size).map(|_| sampler.draw(&mut rng)).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| train[i].label.index()).collect();
            let (loss, logits, grads) = {
                let mut g = Graph::training(&model.params, &mut rng);
                let mut rows = Vec::with_capacity(batch.len());
                for &i in &batch {
                    rows.push(model.forward(&mut g, &train[i].inputs, ForwardOptions::default())?.logits);
                }
                let logits = g.concat(&rows, Axis::Rows)?;
                let loss = g.cross_entropy(logits, &batch_labels)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss(step));
                }
                g.backward(loss)?;
                let logits = g.value(logits).clone();
                (value, logits, g.into_param_grads())
            };
            for (r, &label) in batch_labels.iter().enumerate() {
                preds.push(predicted_label(logits.row_slice(r)));
                truth.push(MiscLabel::from_index(label).expect("label index"));
            }
            loss_sum += loss;
            model.params.zero_grad();
            model.params.accumulate_grads(grads);
            config.optimizer.step(&mut model.params, schedule.lr(step))?;
            step += 1;
        }
        let (val_loss, val_f1) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            loss_and_f1(&val, &predict(model, &val)?)?
        };
        curve.push(EpochRecord {
            epoch,
            lr: lr_epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            train_macro_f1: f1_scores(&preds, &truth)?.macro_,
            val_loss,
            val_macro_f1: val_f1,
        });
        let better = match &best {
            _ if val.is_empty() => true,
            None => true,
            Some((_, f, _)) => val_f1 > *f,
        };
        if better {
            best = Some((epoch, val_f1, model.params.to_named()));
        }
    }
    let (best_epoch, best_f1, params) = best.expect("at least one epoch");
    model.params.load_named(&params)?;
    Ok(TrainOutcome {
        curve,
        best_epoch,
        best_val_macro_f1: best_f1,
    })
}
