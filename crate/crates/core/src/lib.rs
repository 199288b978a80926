//! Core algorithms for the forgetting lab.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod dynamics;
pub mod engine;
pub mod nn;
pub mod replay;
pub mod rng;
pub mod tensor;

pub use data::{Batch, BatchTag, DataError, Dataset, Stream, StreamMode, StreamSpec, TaskDataset};
pub use dynamics::{DynamicsRecord, Metric, SensitivityReport};
pub use engine::{
    EvalResult, FinetuneConfig, FlopsLedger, KfpfConfig, Method, Objective, RunOutput, TrainConfig,
};
pub use nn::{GroupId, Mode, Model, ModelSnapshot, ModelSpec, ParameterGroup, SelectionMask};
pub use replay::{BufferItem, ReplayBuffer};
pub use rng::{Rng, RngState, RNG_ALGORITHM};
pub use tensor::{Graph, NodeId, Tensor, TensorError};
