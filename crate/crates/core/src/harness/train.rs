//! Episodic SGD training.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::episodes::{derive_seed, Dataset, Role};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::Config;
use crate::harness::model::Lerenet;
use crate::harness::{STREAM_INIT, STREAM_TRAIN};
use crate::tensor::{ParamStore, Tape, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: Config,
    pub model: Lerenet,
    pub store: ParamStore<f32>,
    pub velocity: Vec<Tensor<f32>>,
    pub dataset: Dataset,
    pub epoch: usize,
    pub episodes_done: u64,
    pub loss_trace: Vec<f64>,
}

impl Trainer {
    /// Fresh weights drawn from the config seed.
    pub fn new(config: &Config) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_INIT, 0));
        let model = Lerenet::new(&mut store, &mut rng, config)?;
        let velocity = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(Trainer {
            config: config.clone(),
            model,
            store,
            velocity,
            dataset: Dataset::new(config.image_size, config.fold_seed, config.test_fold)?,
            epoch: 0,
            episodes_done: 0,
            loss_trace: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, store) = ckpt.restore()?;
        let cfg = &ckpt.config;
        Ok(Trainer {
            config: cfg.clone(),
            model,
            store,
            velocity: ckpt.velocity.clone(),
            dataset: Dataset::new(cfg.image_size, cfg.fold_seed, cfg.test_fold)?,
            epoch: ckpt.epoch,
            episodes_done: ckpt.episodes_done,
            loss_trace: ckpt.loss_trace.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            episodes_done: self.episodes_done,
            loss_trace: self.loss_trace.clone(),
            params: self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            velocity: self.velocity.clone(),
        }
    }

    pub fn episode_seed(&self, index: u64) -> u64 {
        derive_seed(self.config.seed, STREAM_TRAIN, index)
    }

    /// Forward and backward on one training episode, adding `scale` times
    /// its gradient to the store. Returns the loss.
    fn accumulate(&mut self, index: u64, scale: f32) -> Result<f64> {
        let seed = self.episode_seed(index);
        let episode = self.dataset.sample_episode(Role::Train, self.config.shots, seed)?;
        let mut tape = Tape::new();
        let loss = match self.model.loss(&mut tape, &self.store, &episode) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { seed }),
            Err(e) => return Err(e),
        };
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { seed });
        }
        let grads = match tape.backward(loss) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { seed }),
            Err(e) => return Err(e),
        };
        grads.accumulate_into(&mut self.store, scale);
        Ok(value)
    }

    /// `v <- momentum * v + g; theta <- theta - lr * v`, then clear gradients.
    fn step(&mut self) {
        let lr = self.config.learning_rate as f32;
        let mu = self.config.momentum as f32;
        for (p, v) in self.store.iter_mut().zip(self.velocity.iter_mut()) {
            for ((theta, vel), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
                *vel = mu * *vel + g;
                *theta -= lr * *vel;
            }
        }
        self.store.zero_grad();
    }

    /// One epoch of `episodes_per_epoch` episodes in batches of
    /// `batch_size`, gradients averaged within each batch.
    pub fn run_epoch(&mut self) -> Result<()> {
        let total = self.config.episodes_per_epoch;
        let batch = self.config.batch_size;
        let mut done = 0;
        while done < total {
            let size = batch.min(total - done);
            for _ in 0..size {
                let loss = self.accumulate(self.episodes_done, 1.0 / size as f32)?;
                self.loss_trace.push(loss);
                self.episodes_done += 1;
            }
            self.step();
            done += size;
        }
        self.epoch += 1;
        log::info!(
            "epoch {} done, mean loss {:.4}",
            self.epoch,
            self.loss_trace[self.loss_trace.len() - total..].iter().sum::<f64>() / total as f64
        );
        Ok(())
    }

    /// Train the remaining epochs, writing `<out>/checkpoint.bin` after each.
    pub fn train(&mut self, out: Option<&Path>) -> Result<()> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
            if let Some(dir) = out {
                self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        Ok(())
    }
}

/// Train `config` from scratch.
pub fn train(config: &Config, out: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(config)?;
    t.train(out)?;
    Ok(t)
}
