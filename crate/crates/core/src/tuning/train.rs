//! Bias-tuning training loop.

use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::focal::FocalLossConfig;
use super::optim::{AdamW, AdamWConfig};
use super::partition::{partition_parameters, ParameterPartition};
use crate::data::{augment_annotated, expand_blank_labels, AnnotatedImage, SegmentationSample};
use crate::error::{Error, Result};
use crate::model::{Model, ParamSet};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub focal: FocalLossConfig,
    #[serde(default = "default_augment")]
    pub augment: bool,
    #[serde(default = "default_decoder_decay")]
    pub decoder_weight_decay: f64,
}

fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-4
}
fn default_steps() -> usize {
    1000
}
fn default_augment() -> bool {
    true
}
fn default_decoder_decay() -> f64 {
    0.01
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            learning_rate: default_lr(),
            max_steps: default_steps(),
            seed: 0,
            focal: FocalLossConfig::default(),
            augment: default_augment(),
            decoder_weight_decay: default_decoder_decay(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} must be at least 2",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be a finite non-negative number",
                self.learning_rate
            )));
        }
        if self.decoder_weight_decay.is_nan() || self.decoder_weight_decay < 0.0 {
            return Err(Error::Config("decoder_weight_decay must be ≥ 0".into()));
        }
        self.focal.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            decoder_weight_decay: self.decoder_weight_decay,
            ..AdamWConfig::with_lr(self.learning_rate)
        }
    }
}

/// Forward, focal loss, backward and one AdamW update on trainable tensors.
pub fn training_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &[SegmentationSample],
    optimizer: &mut AdamW<T>,
    focal: &FocalLossConfig,
) -> Result<T> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let out = model.batch_gradients(batch, focal)?;
    let loss = out.loss;
    if !loss.is_finite() {
        let index = out
            .per_sample_loss
            .iter()
            .position(|l| !l.is_finite())
            .unwrap_or(0);
        return Err(Error::NonFiniteLoss {
            index,
            label: batch[index].label.clone(),
        });
    }
    model.set_running(out.running.mean, out.running.var);
    optimizer.apply(model.weights.params_mut(), out.grads.params());
    Ok(loss)
}

/// Deterministic stream of blank-label-expanded pairs, one epoch at a time.
///
/// Pairs of one image stay adjacent so a batch shares encoder passes.
pub struct PairStream<'a> {
    dataset: &'a [AnnotatedImage],
    vocab: &'a [String],
    seed: u64,
    augment: bool,
    epoch: u64,
    buffer: std::collections::VecDeque<SegmentationSample>,
}

impl<'a> PairStream<'a> {
    pub fn new(
        dataset: &'a [AnnotatedImage],
        vocab: &'a [String],
        seed: u64,
        augment: bool,
    ) -> Self {
        Self {
            dataset,
            vocab,
            seed,
            augment,
            epoch: 0,
            buffer: Default::default(),
        }
    }

    fn refill(&mut self) -> Result<()> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        order.shuffle(&mut rng);
        for idx in order {
            let item = &self.dataset[idx];
            let item = if self.augment {
                let mut arng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_a11c);
                arng.set_stream((self.epoch << 32) | idx as u64);
                augment_annotated(item, &mut arng)
            } else {
                item.clone()
            };
            let image = Arc::new(item.image);
            self.buffer
                .extend(expand_blank_labels(image, &item.masks, self.vocab)?);
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Vec<SegmentationSample>> {
        while self.buffer.len() < size {
            self.refill()?;
        }
        Ok(self.buffer.drain(..size).collect())
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// `(step, loss)` for every executed step, 1-based.
    pub loss_history: Vec<(usize, f64)>,
    pub partition: ParameterPartition,
}

impl FitOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.loss_history {
            s += &format!("{step},{loss}\n");
        }
        s
    }
}

/// Trains `model` in place on `dataset` (un-expanded; blank labels are
/// generated per epoch from the model's class vocabulary).
pub fn fit<T: Scalar>(
    cfg: &TrainConfig,
    dataset: &[AnnotatedImage],
    model: &mut Model<T>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let partition = partition_parameters(model)?;
    let vocab = model.config.class_vocab.clone();
    let mut stream = PairStream::new(dataset, &vocab, cfg.seed, cfg.augment);
    let mut optimizer = AdamW::new(cfg.optimizer());
    let mut history = Vec::with_capacity(cfg.max_steps);
    for step in 1..=cfg.max_steps {
        let batch = stream.next_batch(cfg.batch_size)?;
        let loss = training_step(model, &batch, &mut optimizer, &cfg.focal)?.as_f64();
        history.push((step, loss));
        if step % 25 == 0 || step == cfg.max_steps {
            info!("step {step}/{} loss {loss:.4}", cfg.max_steps);
        }
    }
    info!(
        "trainable {} of {} parameters (ratio {:.5})",
        partition.trainable_count(),
        partition.total_count(),
        partition.trainable_ratio()
    );
    Ok(FitOutcome {
        loss_history: history,
        partition,
    })
}
