//! Training, evaluation, fine-tuning, checkpoints, step timing and the
//! experiment matrix.

mod adam;
mod checkpoint;
mod matrix;
mod timing;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::MacVariant;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::microgen::{Category, Corpus};
use crate::model::{answer_vocabulary, encode_samples, question_vocabulary, Batch, EncodedSample, MacModel, ModelConfig};
use crate::tensor::Tape;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use matrix::{
    run_experiment_matrix, standard_corpora, ExperimentPlan, MatrixReport, PlanRow, ReportRow, StandardCorpora, TestSpec,
};
pub use timing::{measure_step_time, synthetic_batch, TimingConfig, TimingStats};

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: MacVariant,
    pub d: usize,
    pub p: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of the corpus used for training; the rest validates.
    pub split: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: MacVariant::Simplified,
            d: 64,
            p: 4,
            batch_size: 64,
            lr: 1e-4,
            epochs: 15,
            seed: 0,
            split: 0.9,
            clip: 8.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::contract(format!("split {} outside (0, 1)", self.split)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.clip > 0.0 && self.eps > 0.0) {
            return Err(Error::contract("lr, clip and eps must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::contract("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("variant", self.variant);
        kv.set("d", self.d);
        kv.set("p", self.p);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv.set("split", self.split);
        kv.set("clip", self.clip);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv
    }

    /// Missing keys keep the values of `base`.
    pub fn from_key_values(kv: &KeyValues, base: TrainConfig) -> Result<Self> {
        Ok(Self {
            variant: kv.parsed_or("variant", base.variant)?,
            d: kv.parsed_or("d", base.d)?,
            p: kv.parsed_or("p", base.p)?,
            batch_size: kv.parsed_or("batch_size", base.batch_size)?,
            lr: kv.parsed_or("lr", base.lr)?,
            epochs: kv.parsed_or("epochs", base.epochs)?,
            seed: kv.parsed_or("seed", base.seed)?,
            split: kv.parsed_or("split", base.split)?,
            clip: kv.parsed_or("clip", base.clip)?,
            beta1: kv.parsed_or("beta1", base.beta1)?,
            beta2: kv.parsed_or("beta2", base.beta2)?,
            eps: kv.parsed_or("eps", base.eps)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub correct: usize,
    pub total: usize,
}

impl CategoryStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    pub per_category: BTreeMap<Category, CategoryStats>,
    pub epoch_seconds: Vec<f64>,
    /// Mean wall time of one optimizer step; zero when nothing trained.
    pub step_seconds: f64,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub scene_id: String,
    pub category: Category,
    pub gold: usize,
    pub predicted: usize,
}

fn encode_corpus(corpus: &Corpus, ckpt_vocab: Option<(&crate::encoder::Vocabulary, &crate::encoder::Vocabulary)>) -> Result<Vec<EncodedSample>> {
    let (qv, av);
    let (q, a) = match ckpt_vocab {
        Some(pair) => pair,
        None => {
            qv = question_vocabulary();
            av = answer_vocabulary();
            (&qv, &av)
        }
    };
    encode_samples(&corpus.samples, &corpus.scene_map(), q, a)
}

fn batches<'a>(samples: &'a [EncodedSample], order: &[usize], size: usize) -> impl Iterator<Item = Vec<&'a EncodedSample>> + 'a {
    let order = order.to_vec();
    (0..order.len().div_ceil(size)).map(move |b| {
        order[b * size..((b + 1) * size).min(order.len())]
            .iter()
            .map(|&i| &samples[i])
            .collect()
    })
}

/// Forward-only pass over `samples`.
pub(crate) fn evaluate_encoded(model: &MacModel<f64>, samples: &[EncodedSample]) -> Result<(Metrics, Vec<Prediction>)> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate an empty corpus"));
    }
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut metrics = Metrics::default();
    let mut preds = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    for chunk in batches(samples, &order, EVAL_BATCH) {
        let batch = Batch::<f64>::from_samples(&chunk)?;
        let mut tape = Tape::new();
        let (loss, fwd) = model.loss(&mut tape, &batch)?;
        loss_sum += tape.value(loss).item()? * chunk.len() as f64;
        let predicted = crate::model::argmax_rows(tape.value(fwd.logits));
        for (s, p) in chunk.iter().zip(predicted) {
            let stats = metrics.per_category.entry(s.category).or_default();
            stats.total += 1;
            if p == s.label {
                stats.correct += 1;
                metrics.correct += 1;
            }
            preds.push(Prediction {
                id: s.id.clone(),
                scene_id: s.scene_id.clone(),
                category: s.category,
                gold: s.label,
                predicted: p,
            });
        }
    }
    metrics.total = samples.len();
    metrics.accuracy = metrics.correct as f64 / metrics.total as f64;
    metrics.loss = loss_sum / metrics.total as f64;
    Ok((metrics, preds))
}

struct EpochOutcome {
    loss: f64,
    accuracy: f64,
    steps: usize,
    seconds: f64,
}

/// One pass of mini-batch Adam over `order`.
fn run_epoch(
    model: &mut MacModel<f64>,
    adam: &mut Adam,
    samples: &[EncodedSample],
    order: &[usize],
    config: &TrainConfig,
) -> Result<EpochOutcome> {
    let start = Instant::now();
    let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
    for chunk in batches(samples, order, config.batch_size) {
        let batch = Batch::<f64>::from_samples(&chunk)?;
        let mut tape = Tape::new();
        let (loss, fwd) = model.loss(&mut tape, &batch)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "loss {value} at optimizer step {} (lr {})",
                adam.steps() + 1,
                config.lr
            )));
        }
        let predicted = crate::model::argmax_rows(tape.value(fwd.logits));
        correct += predicted.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        loss_sum += value * chunk.len() as f64;
        model.params.zero_grad();
        tape.backward_into(loss, &mut model.params)?;
        drop(tape);
        let norm = clip_global_norm(&mut model.params, config.clip);
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("gradient norm {norm} at step {}", adam.steps() + 1)));
        }
        adam.step(&mut model.params);
        steps += 1;
    }
    Ok(EpochOutcome {
        loss: loss_sum / order.len().max(1) as f64,
        accuracy: correct as f64 / order.len().max(1) as f64,
        steps,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains a fresh model on 90% (by default) of `corpus` and returns the
/// checkpoint with the best validation accuracy; ties keep the earlier
/// epoch. The returned metrics are that checkpoint's validation metrics.
pub fn train(config: &TrainConfig, corpus: &Corpus) -> Result<(Checkpoint, Metrics)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::contract("cannot train on an empty corpus"));
    }
    let samples = encode_corpus(corpus, None)?;
    let model_config = ModelConfig::for_corpora(config.variant, config.d, config.p, corpus.config.scene.h, corpus.config.scene.w);
    let mut model = MacModel::<f64>::new(model_config, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_train = if samples.len() < 2 {
        samples.len()
    } else {
        ((config.split * samples.len() as f64).round() as usize).clamp(1, samples.len() - 1)
    };
    let (train_idx, val_idx) = order.split_at(n_train);
    let train_idx = train_idx.to_vec();
    // A single sample validates on itself.
    let val: Vec<EncodedSample> = if val_idx.is_empty() { train_idx.iter() } else { val_idx.iter() }
        .map(|&i| samples[i].clone())
        .collect();

    let mut adam = Adam::new(config.lr, config.beta1, config.beta2, config.eps);
    let (mut best_metrics, _) = evaluate_encoded(&model, &val)?;
    let mut best_params = model.params.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let (mut epoch_seconds, mut total_steps, mut step_time) = (Vec::new(), 0usize, 0.0);
    let mut best_epoch = 0;
    for epoch in 1..=config.epochs {
        let mut epoch_order = train_idx.clone();
        epoch_order.shuffle(&mut rng);
        let out = run_epoch(&mut model, &mut adam, &samples, &epoch_order, config)?;
        let (val_metrics, _) = evaluate_encoded(&model, &val)?;
        history.push(EpochRecord {
            epoch,
            train_loss: out.loss,
            train_accuracy: out.accuracy,
            val_accuracy: val_metrics.accuracy,
            seconds: out.seconds,
        });
        epoch_seconds.push(out.seconds);
        total_steps += out.steps;
        step_time += out.seconds;
        if best_epoch == 0 || val_metrics.accuracy > best_metrics.accuracy {
            best_metrics = val_metrics;
            best_params = model.params.clone();
            best_epoch = epoch;
        }
    }
    best_params.zero_grad();
    best_metrics.epoch_seconds = epoch_seconds;
    best_metrics.step_seconds = if total_steps == 0 { 0.0 } else { step_time / total_steps as f64 };
    let checkpoint = Checkpoint {
        train: *config,
        model: MacModel::from_params(model_config, best_params)?,
        vocab: question_vocabulary(),
        answers: answer_vocabulary(),
        history,
        rng_seed: config.seed,
        rng_word_pos: rng.get_word_pos(),
    };
    Ok((checkpoint, best_metrics))
}

/// Continues training `checkpoint` on every sample of `shard` for
/// `config.epochs` epochs. Metrics are measured on the shard afterwards.
pub fn finetune(checkpoint: &Checkpoint, shard: &Corpus, config: &TrainConfig) -> Result<(Checkpoint, Metrics)> {
    config.validate()?;
    if config.variant != checkpoint.model.config.variant {
        return Err(Error::contract(format!(
            "checkpoint holds a {} model but the config asks for {}",
            checkpoint.model.config.variant, config.variant
        )));
    }
    if shard.is_empty() {
        return Err(Error::contract("cannot fine-tune on an empty shard"));
    }
    let samples = encode_corpus(shard, Some((&checkpoint.vocab, &checkpoint.answers)))?;
    let mut model = checkpoint.model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.lr, config.beta1, config.beta2, config.eps);
    let mut history = checkpoint.history.clone();
    let first = history.last().map_or(1, |h| h.epoch + 1);
    let (mut epoch_seconds, mut steps, mut secs) = (Vec::new(), 0, 0.0);
    for epoch in first..first + config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let out = run_epoch(&mut model, &mut adam, &samples, &order, config)?;
        history.push(EpochRecord {
            epoch,
            train_loss: out.loss,
            train_accuracy: out.accuracy,
            val_accuracy: f64::NAN,
            seconds: out.seconds,
        });
        epoch_seconds.push(out.seconds);
        steps += out.steps;
        secs += out.seconds;
    }
    model.params.zero_grad();
    let (mut metrics, _) = evaluate_encoded(&model, &samples)?;
    metrics.epoch_seconds = epoch_seconds;
    metrics.step_seconds = if steps == 0 { 0.0 } else { secs / steps as f64 };
    let tuned = Checkpoint {
        train: *config,
        model,
        vocab: checkpoint.vocab.clone(),
        answers: checkpoint.answers.clone(),
        history,
        rng_seed: config.seed,
        rng_word_pos: rng.get_word_pos(),
    };
    Ok((tuned, metrics))
}

pub fn evaluate(checkpoint: &Checkpoint, corpus: &Corpus) -> Result<Metrics> {
    evaluate_with_predictions(checkpoint, corpus).map(|(m, _)| m)
}

pub fn evaluate_with_predictions(checkpoint: &Checkpoint, corpus: &Corpus) -> Result<(Metrics, Vec<Prediction>)> {
    if corpus.is_empty() {
        return Err(Error::contract("cannot evaluate an empty corpus"));
    }
    let samples = encode_corpus(corpus, Some((&checkpoint.vocab, &checkpoint.answers)))?;
    evaluate_encoded(&checkpoint.model, &samples)
}
