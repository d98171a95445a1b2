use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::diffcore::DEFAULT_LEARNING_RATE;
use crate::env::WorldConfig;
use crate::error::{Error, Result};
use crate::losses::{check_lambda, DEFAULT_GAMMA, DEFAULT_LAMBDA};
use crate::matching::MatchAlgorithm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub world: WorldConfig,
    /// Environment steps to collect.
    pub total_steps: usize,
    /// Episodes per optimisation step.
    pub batch_size: usize,
    /// Replay capacity in episodes.
    pub buffer_capacity: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `total_steps` over which ε decays linearly.
    pub epsilon_fraction: f64,
    /// Optimiser steps between target copies.
    pub target_sync: usize,
    /// Environment steps between greedy evaluations.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Steps between scheduled re-matches; 0 matches at episode start only.
    /// Eliminations always trigger a re-match at the next step.
    pub rematch_interval: usize,
    pub algorithm: MatchAlgorithm,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            total_steps: 50_000,
            batch_size: 16,
            buffer_capacity: 512,
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
            learning_rate: DEFAULT_LEARNING_RATE,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_fraction: 0.2,
            target_sync: 200,
            eval_interval: 5_000,
            eval_episodes: 32,
            grad_clip: 10.0,
            rematch_interval: 0,
            algorithm: MatchAlgorithm::Oom,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        check_lambda(self.lambda).map_err(|_| Error::config("lambda must lie in [0, 1]"))?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(Error::config(
                "buffer capacity must hold at least one batch",
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        for (name, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("epsilon_fraction", self.epsilon_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.target_sync == 0 || self.eval_interval == 0 {
            return Err(Error::config(
                "target_sync and eval_interval must be positive",
            ));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::config("grad_clip must be nonnegative"));
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`.
    pub fn epsilon_at(&self, step: usize) -> f64 {
        let span = self.epsilon_fraction * self.total_steps as f64;
        if span <= 0.0 {
            return self.epsilon_end;
        }
        let frac = (step as f64 / span).min(1.0);
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }

    /// Applies every recognised key; world keys share the namespace.
    pub fn apply(&mut self, kv: &mut KvConfig) -> Result<()> {
        self.world.apply(kv)?;
        kv.take_into("total_steps", &mut self.total_steps)?;
        kv.take_into("batch_size", &mut self.batch_size)?;
        kv.take_into("buffer_capacity", &mut self.buffer_capacity)?;
        kv.take_into("gamma", &mut self.gamma)?;
        kv.take_into("lambda", &mut self.lambda)?;
        kv.take_into("learning_rate", &mut self.learning_rate)?;
        kv.take_into("epsilon_start", &mut self.epsilon_start)?;
        kv.take_into("epsilon_end", &mut self.epsilon_end)?;
        kv.take_into("epsilon_fraction", &mut self.epsilon_fraction)?;
        kv.take_into("target_sync", &mut self.target_sync)?;
        kv.take_into("eval_interval", &mut self.eval_interval)?;
        kv.take_into("eval_episodes", &mut self.eval_episodes)?;
        kv.take_into("grad_clip", &mut self.grad_clip)?;
        kv.take_into("rematch_interval", &mut self.rematch_interval)?;
        kv.take_into("algorithm", &mut self.algorithm)?;
        kv.take_into("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut kv = KvConfig::load(path)?;
        let mut cfg = Self::default();
        cfg.apply(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}
