//! Mini-batch training loop.
//!
//! Each epoch draws a fresh permutation from a stream keyed by
//! `(seed, epoch)`, so a run resumed from a checkpoint at epoch `k` sees the
//! same batches as an uninterrupted one. The last partial batch is kept.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{NormalizedDataset, NormalizedRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{adamw_step, AdamWConfig, OptimState, Schedule};
use crate::params::Bound;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 1e-4,
            warmup_epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    pub fn schedule(&self, n: usize) -> Result<Schedule> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Schedule::new(
            self.lr,
            self.warmup_epochs,
            self.epochs,
            self.steps_per_epoch(n),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub steps: usize,
    pub wall_time_s: f64,
}

/// Optimizer state plus the number of finished epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub optim: OptimState,
}

impl TrainState {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        Self {
            epochs_done: 0,
            optim: OptimState::new(&model.store, config.adamw()),
        }
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    state: &mut OptimState,
    batch: &[&NormalizedRecord],
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let tape = Tape::new();
        let ctx = Bound::new(&tape, &model.store);
        let loss = model.loss(&ctx, batch)?;
        let grads = tape.backward(loss)?;
        (loss.item(), ctx.into_param_grads(grads))
    };
    adamw_step(&mut model.store, &grads, state, lr)?;
    Ok(loss)
}

/// Runs epochs `state.epochs_done + 1 ..= config.epochs`, calling `on_epoch`
/// after each. The model holds the final-epoch parameters afterwards.
pub fn train(
    model: &mut Model,
    data: &NormalizedDataset,
    config: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.schema.fingerprint() != model.schema.fingerprint() {
        return Err(Error::Schema(format!(
            "training data uses schema {}, model was built for {}",
            data.schema.name(),
            model.schema.name()
        )));
    }
    let schedule = config.schedule(data.len())?;
    let mut logs = Vec::new();
    for epoch in state.epochs_done + 1..=config.epochs {
        let start = Instant::now();
        let order = epoch_order(data.len(), config.seed, epoch);
        let mut total = 0.0;
        let mut lr = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&NormalizedRecord> = chunk.iter().map(|&i| &data.records[i]).collect();
            lr = schedule.lr_at(state.optim.step as usize + 1);
            total += train_step(model, &mut state.optim, &batch, lr)? * batch.len() as f64;
            steps += 1;
        }
        state.epochs_done = epoch;
        let log = EpochLog {
            epoch,
            mean_loss: total / data.len() as f64,
            lr,
            steps,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{} loss {:.5} lr {:.3e} ({:.1}s)",
            config.epochs,
            log.mean_loss,
            lr,
            log.wall_time_s
        );
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Mean loss of the current parameters over `data`, in chunks.
pub fn mean_loss(model: &Model, data: &NormalizedDataset, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for part in data.records.chunks(chunk.max(1)) {
        let batch: Vec<&NormalizedRecord> = part.iter().collect();
        let tape = Tape::new();
        let ctx = Bound::new(&tape, &model.store);
        total += model.loss(&ctx, &batch)?.item() * batch.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}
