use serde::{Deserialize, Serialize};

use crate::nn::{Model, BACKWARD_FACTOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopsCategory {
    ClTraining,
    Replay,
    Finetuning,
}

/// Cumulative FLOPs per category. Only ever grows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub cl_training: u64,
    pub replay: u64,
    pub finetuning: u64,
}

impl FlopsLedger {
    pub fn add(&mut self, category: FlopsCategory, flops: u64) {
        let slot = match category {
            FlopsCategory::ClTraining => &mut self.cl_training,
            FlopsCategory::Replay => &mut self.replay,
            FlopsCategory::Finetuning => &mut self.finetuning,
        };
        *slot += flops;
    }

    pub fn total(&self) -> u64 {
        self.cl_training + self.replay + self.finetuning
    }
}

/// Per-sample costs of one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsModel {
    pub forward_per_sample: u64,
}

impl FlopsModel {
    pub fn of(model: &Model) -> Self {
        Self {
            forward_per_sample: model.forward_flops_per_sample(),
        }
    }

    pub fn forward(&self, batch: usize) -> u64 {
        self.forward_per_sample * batch as u64
    }

    /// Forward plus backward.
    pub fn train_step(&self, batch: usize) -> u64 {
        (1 + BACKWARD_FACTOR) * self.forward(batch)
    }

    pub fn sgd_total(&self, steps: u64, batch: usize) -> u64 {
        steps * self.train_step(batch)
    }

    pub fn er_total(&self, steps: u64, batch: usize, replay_batch: usize) -> u64 {
        steps * (self.train_step(batch) + self.train_step(replay_batch))
    }

    /// SGD plus `passes` finetuning passes of `ft_steps` steps each.
    pub fn kfpf_total(
        &self,
        steps: u64,
        batch: usize,
        passes: u64,
        ft_steps: u64,
        ft_batch: usize,
    ) -> u64 {
        self.sgd_total(steps, batch) + passes * ft_steps * self.train_step(ft_batch)
    }
}
