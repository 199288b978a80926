//! Continual-learning training loops: baselines, post-hoc FPF, and periodic k-FPF.

mod eval;
mod finetune;
mod ledger;
mod loss;
mod train;

pub use eval::{argmax, evaluate, EvalResult};
pub use finetune::{fpf, FinetuneStats};
pub use ledger::{FlopsCategory, FlopsLedger, FlopsModel};
pub use loss::{cosine_lr, cross_entropy, cross_entropy_node, kd_loss, kd_loss_node};
pub use train::{run_der, run_er, run_gdumb, run_kfpf, run_method, run_sgd, Observer, RunOutput};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::DynamicsError;
use crate::nn::{ModelError, SelectionMask};
use crate::replay::BufferError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("finetuning mask is empty")]
    EmptyMask,
    #[error("buffered item has no stored logits")]
    MissingLogits,
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("observer failed: {0}")]
    Observer(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sgd,
    Er,
    /// Stream cross-entropy plus logit matching on buffered samples.
    Der,
    /// Ignore the stream for training; fit a fresh model on the buffer at the end.
    Gdumb,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Er => "er",
            Method::Der => "der",
            Method::Gdumb => "gdumb",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    pub batch_size: usize,
    pub replay_batch_size: usize,
    /// Epochs per task.
    pub epochs: usize,
    pub buffer_capacity: usize,
    /// Weight of the logit-matching term for [`Method::Der`].
    pub der_lambda: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            lr: 0.05,
            batch_size: 32,
            replay_batch_size: 32,
            epochs: 5,
            buffer_capacity: 200,
            der_lambda: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.replay_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if matches!(self.method, Method::Er | Method::Der) && self.buffer_capacity == 0 {
            return bad("replay methods need buffer_capacity > 0");
        }
        if !(self.der_lambda >= 0.0) {
            return bad("der_lambda must be nonnegative");
        }
        Ok(())
    }
}

pub const FPF_STEPS: usize = 300;
pub const KFPF_STEPS: usize = 100;
pub const FINETUNE_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mask: SelectionMask,
    pub steps: usize,
    pub batch_size: usize,
    /// Peak of the cosine schedule.
    pub lr: f64,
}

impl FinetuneConfig {
    pub fn new(mask: SelectionMask, steps: usize, lr: f64) -> Self {
        Self {
            mask,
            steps,
            batch_size: FINETUNE_BATCH,
            lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Ce,
    /// Cross-entropy plus `lambda`-weighted MSE to the stored logits.
    Kd {
        lambda: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfpfConfig {
    /// SGD steps between finetuning passes.
    pub tau: usize,
    pub objective: Objective,
    /// Step at which sensitive groups are identified; defaults to `tau`.
    pub identify_step: Option<usize>,
    pub threshold: f64,
    /// Parameter probes taken before identification.
    pub probes: usize,
    /// Mask used instead of identification, when given.
    pub mask_override: Option<SelectionMask>,
}

impl KfpfConfig {
    pub fn new(tau: usize, objective: Objective) -> Self {
        Self {
            tau,
            objective,
            identify_step: None,
            threshold: crate::dynamics::KFPF_THRESHOLD,
            probes: 10,
            mask_override: None,
        }
    }

    pub fn identify_at(&self) -> usize {
        self.identify_step.unwrap_or(self.tau)
    }

    /// `τ` giving roughly `k` periodic passes over `total_steps`.
    pub fn tau_for(total_steps: usize, k: usize) -> usize {
        (total_steps / k.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.tau == 0 {
            return bad("tau must be at least 1");
        }
        let i = self.identify_at();
        if i == 0 || i > self.tau {
            return bad("identify_step must lie in 1..=tau");
        }
        if let Objective::Kd { lambda } = self.objective {
            if !(lambda >= 0.0) {
                return bad("lambda must be nonnegative");
            }
        }
        if self.probes == 0 {
            return bad("probes must be at least 1");
        }
        Ok(())
    }
}
