use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use weedsense_tensor::{Mode, Tape};

use crate::data::{augment, class_pixel_weights, AugConfig, Batch, Normalization, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Ctx;
use crate::seeds::derive_seed;
use crate::train::checkpoint::Checkpoint;
use crate::train::loss::{multi_task_loss, LossBreakdown, LossWeights};
use crate::train::optim::{AdamW, AdamWConfig};
use crate::train::schedule::ScheduleSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    Uniform,
    MedianFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub warmup_start_factor: f64,
    pub min_lr: f64,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
    pub class_weighting: ClassWeighting,
    pub augment: Option<AugConfig>,
    pub normalization: Normalization,
    /// The last this-many iterations run batch norm on its running statistics (which
    /// then stop updating), so the final weights are fitted to the inference-time network.
    pub bn_freeze_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = ScheduleSpec::default();
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            seed: 0,
            base_lr: s.base_lr,
            warmup_iters: s.warmup_iters,
            warmup_start_factor: s.warmup_start_factor,
            min_lr: s.min_lr,
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
            class_weighting: ClassWeighting::MedianFrequency,
            augment: None,
            normalization: Normalization::IMAGENET,
            bn_freeze_iters: 0,
        }
    }
}

impl TrainConfig {
    pub fn iters_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    pub fn total_iters(&self, n: usize) -> usize {
        self.epochs * self.iters_per_epoch(n)
    }

    pub fn schedule(&self, n: usize) -> ScheduleSpec {
        ScheduleSpec {
            base_lr: self.base_lr,
            warmup_iters: self.warmup_iters,
            total_iters: self.total_iters(n),
            min_lr: self.min_lr,
            warmup_start_factor: self.warmup_start_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.base_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.base_lr {
            return Err(Error::config(format!("learning rates base {} min {} are inconsistent", self.base_lr, self.min_lr)));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: [&str; 7] = ["iter", "lr", "loss_total", "loss_seg", "loss_aux", "loss_height", "loss_week"];

/// CSV training log with a fixed header.
pub struct LogWriter<W: std::io::Write> {
    inner: csv::Writer<W>,
}

impl LogWriter<fs::File> {
    pub fn create(path: &Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        LogWriter::new(f)
    }
}

impl<W: std::io::Write> LogWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(LOG_HEADER).map_err(csv_err)?;
        Ok(LogWriter { inner })
    }

    pub fn write(&mut self, r: &LogRecord) -> Result<()> {
        let l = r.loss;
        let row = [r.iter.to_string(), r.lr.to_string(), l.total.to_string(), l.seg.to_string(), l.aux.to_string(), l.height.to_string(), l.week.to_string()];
        self.inner.write_record(&row).map_err(csv_err)?;
        self.inner.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Training state: model, optimizer and the number of completed iterations.
///
/// Iteration `i` is fully determined by the seed and `i`: the shuffle order comes from
/// the epoch, augmentation from the sample and epoch, dropout from the iteration. This
/// is what makes resuming from a checkpoint reproduce an uninterrupted run exactly.
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    pub config: TrainConfig,
    pub iter: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: AdamW::new(config.optimizer),
            model,
            config,
            iter: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt
            .train
            .clone()
            .ok_or_else(|| Error::Format("checkpoint has no training configuration".into()))?;
        let (optimizer, iter) = (ckpt.optimizer.clone(), ckpt.iter);
        let model = ckpt.into_model()?;
        Ok(Trainer {
            model,
            optimizer,
            config,
            iter,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config().clone(),
            train: Some(self.config.clone()),
            seed: self.config.seed,
            iter: self.iter,
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Dataset indices of iteration `iter`. A short final batch is filled from the start
    /// of the epoch's order so every batch has `batch_size` samples.
    pub fn batch_indices(&self, n: usize, iter: usize) -> Vec<usize> {
        let per_epoch = self.config.iters_per_epoch(n);
        let (epoch, b) = (iter / per_epoch, iter % per_epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[1, epoch as u64])));
        let bs = self.config.batch_size;
        (b * bs..(b + 1) * bs).map(|i| order[i % n]).collect()
    }

    fn class_weights(&self, data: &[Sample]) -> Option<Vec<f64>> {
        match self.config.class_weighting {
            ClassWeighting::Uniform => None,
            ClassWeighting::MedianFrequency => Some(class_pixel_weights(data, self.model.config().num_classes)),
        }
    }

    fn step_with(&mut self, data: &[Sample], class_weights: Option<&[f64]>) -> Result<LogRecord> {
        let n = data.len();
        let epoch = self.iter / self.config.iters_per_epoch(n);
        let idx = self.batch_indices(n, self.iter);
        let samples: Vec<Sample> = match &self.config.augment {
            Some(a) => idx
                .iter()
                .map(|&i| augment(&data[i], a, derive_seed(self.config.seed, &[2, i as u64, epoch as u64])))
                .collect::<Result<_>>()?,
            None => idx.iter().map(|&i| data[i].clone()).collect(),
        };
        let refs: Vec<&Sample> = samples.iter().collect();
        let batch = Batch::new(&refs, &self.config.normalization)?;
        let lr = self.config.schedule(n).lr_at(self.iter);
        let frozen = self.iter + self.config.bn_freeze_iters >= self.config.total_iters(n);

        let tape = Tape::new();
        let ctx = Ctx::new(&self.model.params, Some(&tape), Mode::Train)
            .with_dropout_seed(derive_seed(self.config.seed, &[3, self.iter as u64]))
            .with_frozen_bn(frozen);
        let x = weedsense_tensor::Var::constant(batch.images.clone());
        let out = self.model.net.forward(&ctx, &x)?;
        let cfg = self.model.config();
        let (loss, breakdown) = multi_task_loss(&out, &batch, class_weights, &self.config.loss, cfg)?;
        if !breakdown.is_finite() || !loss.value().all_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                detail: format!("iteration {}, batch {}", self.iter, batch.ids.join(",")),
            });
        }
        let grads = tape.gradients(&loss)?;
        let stats = ctx.take_stats();
        drop((out, loss, ctx));
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        self.model.params.apply_batch_stats(stats);
        let record = LogRecord {
            iter: self.iter,
            lr,
            loss: breakdown,
        };
        self.iter += 1;
        Ok(record)
    }

    /// Runs one iteration.
    pub fn step(&mut self, data: &[Sample]) -> Result<LogRecord> {
        let w = self.class_weights(data);
        self.step_with(data, w.as_deref())
    }

    /// Trains until `stop_at` iterations (default: all epochs) have completed, passing
    /// each record to `on_record`.
    pub fn run(&mut self, data: &[Sample], stop_at: Option<usize>, mut on_record: impl FnMut(&LogRecord) -> Result<()>) -> Result<Vec<LogRecord>> {
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let end = stop_at.unwrap_or(usize::MAX).min(self.config.total_iters(data.len()));
        let w = self.class_weights(data);
        let mut log = Vec::new();
        while self.iter < end {
            let r = self.step_with(data, w.as_deref())?;
            on_record(&r)?;
            log.push(r);
        }
        Ok(log)
    }
}
