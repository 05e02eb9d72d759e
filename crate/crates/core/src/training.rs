//! Minibatch loop shared by every trained model in the crate.

use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use safer_nn::{Adam, AdamConfig, Bound, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaferError};
use crate::seeds::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SaferError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(SaferError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(SaferError::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Mean training loss per epoch, measured before each batch's update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLoss>,
}

impl TrainLog {
    pub fn first(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.mean_loss)
    }

    pub fn last(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,mean_loss")?;
        for e in &self.epochs {
            writeln!(w, "{},{}", e.epoch, e.mean_loss)?;
        }
        Ok(())
    }
}

pub(crate) struct Trainer {
    adam: Adam,
    rng: ChaCha8Rng,
    batch_size: usize,
    epochs_run: usize,
}

impl Trainer {
    pub(crate) fn new(store: &ParamStore, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::with_lr(config.lr)
        };
        Ok(Self {
            adam: Adam::new(adam, store),
            rng: rng_from(config.seed),
            batch_size: config.batch_size,
            epochs_run: 0,
        })
    }

    /// One pass over `n` examples in shuffled minibatches. `batch_loss` must
    /// return the mean loss over the indices it is given.
    pub(crate) fn epoch<F>(&mut self, store: &mut ParamStore, n: usize, mut batch_loss: F) -> Result<EpochLoss>
    where
        F: FnMut(&mut Tape, &Bound, &[usize]) -> Result<Var>,
    {
        let epoch = self.epochs_run;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(self.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = tape.bind(store, true);
            let loss = batch_loss(&mut tape, &bound, batch)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(SaferError::Numeric(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {b}"
                )));
            }
            let grads = tape.backward(loss)?.params(&bound, store);
            self.adam.step(store, &grads).map_err(|e| {
                SaferError::Numeric(format!("epoch {epoch}, batch {b}: {e}"))
            })?;
            total += value * batch.len() as f64;
        }
        self.epochs_run += 1;
        Ok(EpochLoss {
            epoch,
            mean_loss: total / n.max(1) as f64,
        })
    }
}
