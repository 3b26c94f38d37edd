//! Mini-batch training of the encoder and output layer.
//!
//! Batch order is a pure function of `(seed, epoch)`, so a [`TrainState`]
//! that records the epoch and the number of batches already applied is
//! enough to resume the exact batch sequence.

mod checkpoint;
mod grid;
mod optimizer;
mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainConfigRecord, FORMAT_VERSION};
pub use grid::{grid_points, grid_search, parse_grid_axis, render_grid_table, GridAxis, GridResult};
pub use optimizer::{clip_global_norm, Optimizer, OptimizerKind};
pub use run::{
    load_run, run_experiment, Divergence, LoadedRun, RunOutcome, RunPaths, CHECKPOINT_FILE, CONFIG_FILE, VOCAB_FILE,
};

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_windows, Batch, CorpusSplit};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{LanguageModel, ModelCache, ModelConfig, Parameters};
use crate::output_layer::LossValue;
use crate::scalar::Scalar;

/// Batch size used when scoring the dev split.
pub const EVAL_BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub model: ModelConfig<T>,
    pub optimizer: OptimizerKind,
    pub learning_rate: T,
    pub batch_size: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: T,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn new(model: ModelConfig<T>) -> Self {
        Self {
            model,
            optimizer: OptimizerKind::Adam,
            learning_rate: T::lit(1e-3),
            batch_size: 64,
            clip_norm: T::lit(5.0),
            max_epochs: 20,
            patience: 5,
            seed: 0,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |name, value: f64, reason| Err(Error::InvalidHyperparameter { name, value, reason });
        if !(self.learning_rate.is_finite() && self.learning_rate >= T::zero()) {
            return bad(
                "learning_rate",
                self.learning_rate.as_f64(),
                "must be finite and non-negative",
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", 0.0, "must be positive");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > T::zero()) {
            return bad("clip_norm", self.clip_norm.as_f64(), "must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", 0.0, "must be positive");
        }
        if self.patience == 0 {
            return bad("patience", 0.0, "must be at least 1");
        }
        let unit = |x: T| x >= T::zero() && x < T::one();
        if !unit(self.beta1) || !unit(self.beta2) {
            return bad(
                "beta",
                self.beta1.min(self.beta2).as_f64(),
                "Adam betas must lie in [0, 1)",
            );
        }
        if self.seed > i64::MAX as u64 {
            return bad("seed", self.seed as f64, "must fit in a signed 64-bit integer");
        }
        if self.epsilon.is_nan() || self.epsilon < T::zero() {
            return bad("epsilon", self.epsilon.as_f64(), "must be non-negative");
        }
        Ok(())
    }
}

/// Running sums over the current epoch, weighted by targets.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSums<T> {
    pub loss: T,
    pub regularizer: T,
    pub pi: Vec<T>,
    pub targets: u64,
}

impl<T: Scalar> EpochSums<T> {
    fn new(k: usize) -> Self {
        Self {
            loss: T::zero(),
            regularizer: T::zero(),
            pi: vec![T::zero(); k],
            targets: 0,
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: LanguageModel<T>,
    pub optimizer: Optimizer<T>,
    /// Completed epochs.
    pub epoch: u64,
    /// Batches of the current epoch already applied.
    pub batch_in_epoch: u64,
    /// Total updates applied.
    pub step: u64,
    pub best_dev_ppl: T,
    /// Epoch (1-based) that produced `best_dev_ppl`; 0 before any.
    pub best_epoch: u64,
    /// Consecutive epochs without dev improvement.
    pub stale_epochs: u64,
    pub sums: EpochSums<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn init(config: &TrainConfig<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = LanguageModel::init(config.model.clone(), &mut rng)?;
        let optimizer = Optimizer::new(
            config.optimizer,
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.epsilon,
            &model,
        );
        Ok(Self {
            optimizer,
            epoch: 0,
            batch_in_epoch: 0,
            step: 0,
            best_dev_ppl: T::infinity(),
            best_epoch: 0,
            stale_epochs: 0,
            sums: EpochSums::new(model.config.mixture.k()),
            model,
        })
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics<T> {
    /// 1-based epoch number.
    pub epoch: u64,
    /// Mean regularized training loss over the epoch's targets.
    pub train_loss: T,
    pub dev_ppl: T,
    /// Mean mixture weight per component over the epoch's targets.
    pub pi_mean: Vec<T>,
    /// Mean regularizer value over the epoch's targets.
    pub reg_term: T,
}

pub fn metrics_header(k: usize) -> String {
    let mut s = String::from("epoch,train_loss,dev_ppl");
    for i in 1..=k {
        let _ = write!(s, ",pi_mean_{i}");
    }
    s.push_str(",reg_term");
    s
}

impl<T: Scalar> EpochMetrics<T> {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{}", self.epoch, self.train_loss, self.dev_ppl);
        for p in &self.pi_mean {
            let _ = write!(s, ",{p}");
        }
        let _ = write!(s, ",{}", self.reg_term);
        s
    }
}

/// Drives a [`TrainState`] over a corpus split.
#[derive(Debug, Clone)]
pub struct Trainer<'a, T> {
    pub config: TrainConfig<T>,
    pub split: &'a CorpusSplit,
    pub state: TrainState<T>,
    /// State at the epoch with the best dev perplexity so far.
    pub best: Option<TrainState<T>>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(config: TrainConfig<T>, split: &'a CorpusSplit) -> Result<Self> {
        let state = TrainState::init(&config)?;
        Self::resume(config, split, state)
    }

    pub fn resume(config: TrainConfig<T>, split: &'a CorpusSplit, state: TrainState<T>) -> Result<Self> {
        config.validate()?;
        if split.train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        if split.dev.is_empty() {
            return Err(Error::EmptySplit("dev"));
        }
        Ok(Self {
            config,
            split,
            state,
            best: None,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.max_epochs as u64 || self.state.stale_epochs >= self.config.patience as u64
    }

    /// The remaining batches of the current epoch.
    pub fn remaining_batches(&self) -> impl Iterator<Item = Batch> + 'a {
        batch_windows(
            &self.split.train,
            self.config.model.context,
            self.config.batch_size,
            self.config.seed,
            self.state.epoch,
        )
        .skip_batches(self.state.batch_in_epoch as usize)
    }

    /// Applies one update. On divergence the state is left at the last
    /// finite step.
    pub fn step(&mut self, batch: &Batch) -> Result<LossValue<T>> {
        let model = &self.state.model;
        let step = self.state.step + 1;
        let diverged = |component| Error::DivergenceDetected { step, component };
        let (value, mut grads, cache) = match model.loss_and_grad(batch.windows.view(), &batch.targets) {
            Ok(r) => r,
            Err(Error::NonFiniteScore { component, .. }) => return Err(diverged(component)),
            Err(e) => return Err(e),
        };
        if !value.total.is_finite() {
            return Err(diverged(nonfinite_component(&cache)));
        }
        if !grads.all_finite() {
            return Err(diverged(None));
        }
        clip_global_norm(&mut grads, self.config.clip_norm);

        let backup = (self.state.model.clone(), self.state.optimizer.clone());
        self.state.optimizer.step(&mut self.state.model, &grads)?;
        self.state.model.project();
        if !self.state.model.all_finite() {
            (self.state.model, self.state.optimizer) = backup;
            return Err(diverged(None));
        }

        let b = T::from_count(batch.targets.len());
        let sums = &mut self.state.sums;
        sums.loss += value.total * b;
        sums.regularizer += value.regularizer * b;
        for (k, s) in sums.pi.iter_mut().enumerate() {
            *s += cache.output.mixture.column(k).sum();
        }
        sums.targets += batch.targets.len() as u64;
        self.state.step = step;
        self.state.batch_in_epoch += 1;
        Ok(value)
    }

    /// Closes the current epoch: scores dev, updates early-stopping state
    /// and returns the epoch's metrics.
    pub fn end_epoch(&mut self) -> Result<EpochMetrics<T>> {
        let dev_ppl = eval::perplexity(&self.state.model, &self.split.dev, EVAL_BATCH)?;
        let k = self.config.model.mixture.k();
        let sums = std::mem::replace(&mut self.state.sums, EpochSums::new(k));
        let n = T::from_count(sums.targets.max(1) as usize);
        self.state.epoch += 1;
        self.state.batch_in_epoch = 0;
        let metrics = EpochMetrics {
            epoch: self.state.epoch,
            train_loss: sums.loss / n,
            dev_ppl,
            pi_mean: sums.pi.iter().map(|&s| s / n).collect(),
            reg_term: sums.regularizer / n,
        };
        if dev_ppl < self.state.best_dev_ppl {
            self.state.best_dev_ppl = dev_ppl;
            self.state.best_epoch = self.state.epoch;
            self.state.stale_epochs = 0;
            self.best = Some(self.state.clone());
        } else {
            self.state.stale_epochs += 1;
        }
        Ok(metrics)
    }

    /// Runs the rest of the current epoch.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics<T>> {
        for batch in self.remaining_batches() {
            self.step(&batch)?;
        }
        self.end_epoch()
    }

    /// Trains until `max_epochs` or early stopping, calling `on_epoch` after
    /// each epoch.
    pub fn run(
        &mut self,
        mut on_epoch: impl FnMut(&Self, &EpochMetrics<T>) -> Result<()>,
    ) -> Result<Vec<EpochMetrics<T>>> {
        let mut all = Vec::new();
        while !self.finished() {
            let m = self.run_epoch()?;
            on_epoch(self, &m)?;
            all.push(m);
        }
        Ok(all)
    }
}

fn nonfinite_component<T: Scalar>(cache: &ModelCache<T>) -> Option<usize> {
    cache
        .output
        .log_softmax
        .iter()
        .position(|ls| ls.iter().any(|x| !x.is_finite()))
}

/// Trains from scratch and returns the per-epoch metrics and the final trainer state.
pub fn train<T: Scalar>(config: TrainConfig<T>, split: &CorpusSplit) -> Result<(Trainer<'_, T>, Vec<EpochMetrics<T>>)> {
    let mut trainer = Trainer::new(config, split)?;
    let metrics = trainer.run(|_, _| Ok(()))?;
    Ok((trainer, metrics))
}
