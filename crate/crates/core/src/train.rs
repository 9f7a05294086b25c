//! Epoch loop: shuffled mini-batch Adam steps, then a validation pass.
//!
//! Per-epoch randomness (batch order, dropout masks) is derived from
//! `(seed, epoch)`, so a run resumed from an epoch-boundary checkpoint
//! follows the same trajectory as an uninterrupted one.

use crate::checkpoint::Checkpoint;
use crate::dataset::{batches, ordered_batches, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::ConfusionMatrix;
use crate::model::{backward, forward, update_batchnorm_stats, ArchConfig, Model, ModelGraph};
use crate::objective::{cce, softmax, DEFAULT_LAMBDA};
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::rng::{derive_seed, seeded_rng, streams};

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_PREFETCH_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub lambda: f64,
    pub prefetch_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: DEFAULT_BATCH_SIZE,
            schedule: LrSchedule::default(),
            lambda: DEFAULT_LAMBDA,
            prefetch_depth: DEFAULT_PREFETCH_DEPTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the regularised batch objective.
    pub train_loss: f64,
    /// Mean cross-entropy over the validation split, infer mode.
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Infer-mode cross-entropy and confusion matrix over one split.
pub fn evaluate(model: &Model<f32>, index: &DatasetIndex, split: Split, batch_size: usize, prefetch: usize) -> Result<Evaluation> {
    let mut confusion = ConfusionMatrix::new(model.graph.classes());
    let mut loss_sum = 0.0;
    let mut rng = seeded_rng(0);
    for batch in ordered_batches(index, split, batch_size, prefetch)? {
        let (logits, _) = forward(&model.graph, &model.store, &batch.images, Mode::Infer, &mut rng)?;
        let probs = softmax(&logits)?;
        loss_sum += cce(&probs, &batch.labels)?.loss * batch.len() as f64;
        confusion.add_all(&batch.labels, &logits.argmax_rows()?)?;
    }
    let n = confusion.total();
    Ok(Evaluation {
        loss: if n == 0 { 0.0 } else { loss_sum / n as f64 },
        accuracy: confusion.accuracy(),
        confusion,
    })
}

/// The full network with an output layer of `classes` units.
pub fn arch_for(classes: usize) -> ArchConfig {
    ArchConfig {
        classes,
        ..ArchConfig::akhcrnet()
    }
}

/// Rebuilds the network a checkpoint was saved from.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model<f32>> {
    let graph = ModelGraph::build(&arch_for(ck.class_names.len()))?;
    graph.check_store(&ck.store)?;
    Ok(Model {
        graph,
        store: ck.store.clone(),
    })
}

pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pub index: DatasetIndex,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(index: DatasetIndex, config: TrainConfig) -> Result<Self> {
        if index.count(Split::Train) == 0 {
            return Err(Error::Split("training split is empty".into()));
        }
        if config.batch_size < 2 {
            return Err(Error::Range("batch size must be at least 2 for batch-norm".into()));
        }
        let model = Model::new(&arch_for(index.num_classes()), config.seed)?;
        log::info!("network has {} parameters", model.store.param_count());
        let adam = AdamState::new(&model.store, AdamConfig::default());
        Ok(Trainer {
            model,
            adam,
            config,
            index,
            history: Vec::new(),
        })
    }

    /// Continues from a saved epoch boundary.
    pub fn from_checkpoint(ck: Checkpoint, index: DatasetIndex, config: TrainConfig) -> Result<Self> {
        if ck.class_names != index.class_names {
            return Err(Error::Config("checkpoint classes differ from the dataset classes".into()));
        }
        let mut t = Trainer::new(index, config)?;
        t.model.graph.check_store(&ck.store)?;
        if ck.history.len() != ck.epoch as usize {
            return Err(Error::Config("checkpoint history does not match its epoch count".into()));
        }
        t.model.store = ck.store;
        t.adam = ck.adam;
        t.history = ck.history;
        Ok(t)
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.config.schedule.total_epochs()
    }

    /// Trains the next epoch and evaluates on the validation split.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epochs_done() + 1;
        let lr = self.config.schedule.lr_for_epoch(epoch)?;
        let seed = self.config.seed;
        let loss_cfg = self.model.graph.loss_config(self.config.lambda);
        let mut dropout_rng = seeded_rng(derive_seed(seed, &[streams::DROPOUT, epoch as u64]));
        let stream = batches(
            &self.index,
            Split::Train,
            self.config.batch_size,
            derive_seed(seed, &[streams::SHUFFLE, epoch as u64]),
            self.config.prefetch_depth,
        )?;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in stream {
            if batch.len() < 2 {
                log::warn!("epoch {epoch}: skipping a batch of {} sample for batch-norm", batch.len());
                continue;
            }
            let m = &mut self.model;
            let (_, cache) = forward(&m.graph, &m.store, &batch.images, Mode::Train, &mut dropout_rng)?;
            let (report, grads) = backward(&m.graph, &m.store, &cache, &batch.labels, &loss_cfg)?;
            if !report.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in epoch {epoch}")));
            }
            update_batchnorm_stats(&m.graph, &mut m.store, &cache)?;
            self.adam.step(&mut m.store, &grads, lr)?;
            loss_sum += report.total * batch.len() as f64;
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::Split(format!("epoch {epoch} saw no trainable batch")));
        }
        let val = self.evaluate(Split::Val)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
        };
        self.history.push(record);
        Ok(record)
    }

    pub fn evaluate(&self, split: Split) -> Result<Evaluation> {
        evaluate(&self.model, &self.index, split, self.config.batch_size, self.config.prefetch_depth)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            store: self.model.store.clone(),
            adam: self.adam.clone(),
            epoch: self.epochs_done() as u32,
            class_names: self.index.class_names.clone(),
            history: self.history.clone(),
        }
    }
}
