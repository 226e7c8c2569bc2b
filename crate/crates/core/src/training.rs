//! Shared mini-batch training settings, chronological splits and
//! early-stopping bookkeeping.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::AdamConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub min_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub optimizer: AdamConfig,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_epochs: 1000,
            min_epochs: 100,
            patience: 50,
            validation_fraction: 0.2,
            optimizer: AdamConfig::default(),
            lr_decay: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and max epochs must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation fraction must lie in (0, 1)".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("learning rate decay must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.optimizer.learning_rate * self.lr_decay.powi(epoch as i32)
    }

    /// Chronological split: the first records train, the tail validates.
    pub fn split(&self, len: usize) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let n_val = ((len as f64) * self.validation_fraction).round() as usize;
        let n_train = len.saturating_sub(n_val);
        if n_train == 0 {
            return Err(Error::Empty("training split"));
        }
        if n_val == 0 {
            return Err(Error::Empty("validation split"));
        }
        Ok((0..n_train, n_train..len))
    }
}

/// Loss curves and the early-stopping outcome of one fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// Running minimum of the validation loss.
    pub best_so_far: Vec<f64>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub epochs_run: usize,
}

/// Early-stopping tracker holding the best parameters seen.
pub(crate) struct EarlyStopping {
    best: f64,
    best_epoch: usize,
    best_params: Vec<Vec<f64>>,
    report: TrainReport,
}

impl EarlyStopping {
    pub(crate) fn new(initial: Vec<Vec<f64>>) -> Self {
        EarlyStopping {
            best: f64::INFINITY,
            best_epoch: 0,
            best_params: initial,
            report: TrainReport::default(),
        }
    }

    /// Records one epoch; returns `true` when training should stop.
    pub(crate) fn record(
        &mut self,
        epoch: usize,
        train: f64,
        validation: f64,
        params: impl FnOnce() -> Vec<Vec<f64>>,
        config: &TrainConfig,
    ) -> Result<bool> {
        if !train.is_finite() || !validation.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: if train.is_finite() { validation } else { train },
            });
        }
        if validation < self.best {
            self.best = validation;
            self.best_epoch = epoch;
            self.best_params = params();
        }
        self.report.train_loss.push(train);
        self.report.validation_loss.push(validation);
        self.report.best_so_far.push(self.best);
        let run = epoch + 1;
        Ok(run >= config.max_epochs || (run >= config.min_epochs && epoch - self.best_epoch >= config.patience))
    }

    pub(crate) fn finish(mut self) -> (Vec<Vec<f64>>, TrainReport) {
        self.report.best_epoch = self.best_epoch;
        self.report.best_validation_loss = self.best;
        self.report.epochs_run = self.report.train_loss.len();
        (self.best_params, self.report)
    }
}

/// Training indices in a freshly shuffled order.
pub(crate) fn shuffled(range: std::ops::Range<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = range.collect();
    idx.shuffle(rng);
    idx
}
