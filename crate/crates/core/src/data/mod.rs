//! Task streams for class-incremental and domain-incremental learning.

mod idx;
mod split;
mod synth;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};
pub use split::{make_domain_stream, split_class_il, ClassSplit, DomainTransform};
pub use synth::synth_gaussian;

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad class partition: {0}")]
    BadPartition(String),
    #[error("unsupported transform: {0}")]
    UnsupportedTransform(String),
    #[error("could not place {classes} centroids {sep} apart in {dim} dimensions")]
    InfeasibleSeparation {
        classes: usize,
        dim: usize,
        sep: f64,
    },
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("IDX file truncated")]
    Truncated,
    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A labelled sample collection with a global label space `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    /// Row-major, `len() == labels.len() * product(sample_shape)`.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

pub const FIXTURE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Fixture {
    version: u32,
    #[serde(flatten)]
    dataset: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.inputs[i * d..(i + 1) * d]
    }

    /// Same data viewed with a different per-sample shape.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.sample_len() {
            return Err(DataError::InvalidSpec(format!(
                "cannot view samples of {:?} as {shape:?}",
                self.sample_shape
            )));
        }
        self.sample_shape = shape;
        Ok(self)
    }

    /// Versioned JSON fixture for cross-implementation comparison.
    pub fn to_fixture_json(&self) -> String {
        serde_json::to_string(&Fixture {
            version: FIXTURE_VERSION,
            dataset: self.clone(),
        })
        .expect("dataset serializes")
    }

    pub fn from_fixture_json(s: &str) -> Result<Self> {
        let f: Fixture =
            serde_json::from_str(s).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        if f.version != FIXTURE_VERSION {
            return Err(DataError::InvalidSpec(format!(
                "fixture version {}",
                f.version
            )));
        }
        Ok(f.dataset)
    }
}

/// One task's data: inputs `[num, ...sample_shape]` and labels from `class_set`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    /// 1-based.
    pub task_index: usize,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_set: BTreeSet<usize>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d: usize = self.sample_shape().iter().product();
        &self.inputs.data()[i * d..(i + 1) * d]
    }

    /// Gather the given rows into a batch tensor.
    pub fn gather(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let d: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.sample(r));
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        (Tensor::new(shape, data).expect("sized"), labels)
    }

    fn subset(&self, rows: &[usize]) -> TaskDataset {
        let (inputs, labels) = self.gather(rows);
        TaskDataset {
            task_index: self.task_index,
            inputs,
            labels,
            class_set: self.class_set.clone(),
        }
    }

    /// Random `(train, holdout)` split with `ceil(fraction·len)` held out.
    pub fn split_holdout(&self, fraction: f64, rng: &mut Rng) -> (TaskDataset, TaskDataset) {
        let mut order = rng.permutation(self.len());
        let n_hold = ((self.len() as f64) * fraction).ceil() as usize;
        let n_hold = n_hold.min(self.len());
        let train_rows = order.split_off(n_hold);
        (self.subset(&train_rows), self.subset(&order))
    }

    pub(crate) fn from_dataset(
        task_index: usize,
        ds: &Dataset,
        rows: &[usize],
        class_set: BTreeSet<usize>,
    ) -> Self {
        let d = ds.sample_len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(ds.sample(r));
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&ds.sample_shape);
        TaskDataset {
            task_index,
            inputs: Tensor::new(shape, data).expect("sized"),
            labels: rows.iter().map(|&r| ds.labels[r]).collect(),
            class_set,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    ClassIl,
    DomainIl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    SyntheticGaussian {
        num_classes: usize,
        dim: usize,
        per_class: usize,
        sep: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

/// Declarative description of a task stream; [`StreamSpec::build`] is a pure
/// function of the spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub mode: StreamMode,
    pub tasks: usize,
    /// Epochs per task.
    pub epochs: usize,
    pub source: DataSource,
    /// Explicit class chunk sizes for class-IL; balanced chunks when absent.
    #[serde(default)]
    pub chunks: Option<Vec<usize>>,
    #[serde(default)]
    pub transform: Option<DomainTransform>,
    /// Per-sample view of the inputs, e.g. `[1, 4, 4]` for a 16-dim source.
    #[serde(default)]
    pub sample_shape: Option<Vec<usize>>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub seed: u64,
}

fn default_val_fraction() -> f64 {
    0.1
}

impl StreamSpec {
    /// The default desk-scale corpus: 10 Gaussian classes in 16 dimensions,
    /// 500 samples per class, centroids at least 6 standard deviations apart.
    pub fn synthetic_class_il(tasks: usize, epochs: usize, seed: u64) -> Self {
        Self {
            mode: StreamMode::ClassIl,
            tasks,
            epochs,
            source: DataSource::SyntheticGaussian {
                num_classes: 10,
                dim: 16,
                per_class: 500,
                sep: 6.0,
            },
            chunks: None,
            transform: None,
            sample_shape: None,
            val_fraction: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks < 1 || self.epochs < 1 {
            return Err(DataError::InvalidSpec(
                "tasks and epochs must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(DataError::InvalidSpec(
                "val_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.mode == StreamMode::DomainIl && self.transform.is_none() {
            return Err(DataError::InvalidSpec("domain_il needs a transform".into()));
        }
        Ok(())
    }

    pub fn load_source(&self) -> Result<Dataset> {
        let mut rng = Rng::new(self.seed);
        let data_seed = rng.fork(1).seed();
        let ds = match &self.source {
            DataSource::SyntheticGaussian {
                num_classes,
                dim,
                per_class,
                sep,
            } => synth_gaussian(*num_classes, *dim, *per_class, *sep, data_seed)?,
            DataSource::Idx { images, labels } => load_idx(images, labels)?,
        };
        match &self.sample_shape {
            Some(shape) => ds.reshaped(shape.clone()),
            None => Ok(ds),
        }
    }

    pub fn build(&self) -> Result<Stream> {
        self.validate()?;
        let ds = self.load_source()?;
        let mut rng = Rng::new(self.seed);
        let _ = rng.fork(1);
        let split_seed = rng.fork(2).seed();
        let holdout_seed = rng.fork(3).seed();
        let tasks = match self.mode {
            StreamMode::ClassIl => {
                let split = match &self.chunks {
                    Some(c) => ClassSplit::Chunks(c.clone()),
                    None => ClassSplit::Tasks(self.tasks),
                };
                let tasks = split_class_il(&ds, &split, split_seed)?;
                if tasks.len() != self.tasks {
                    return Err(DataError::BadPartition(format!(
                        "chunk list yields {} tasks, spec says {}",
                        tasks.len(),
                        self.tasks
                    )));
                }
                tasks
            }
            StreamMode::DomainIl => {
                let base = split_class_il(&ds, &ClassSplit::Tasks(1), split_seed)?.remove(0);
                let transform = self.transform.clone().expect("validated");
                make_domain_stream(&base, self.tasks, &transform, split_seed)?
            }
        };
        let mut hold_rng = Rng::new(holdout_seed);
        let (train, val) = tasks
            .iter()
            .map(|t| t.split_holdout(self.val_fraction, &mut hold_rng))
            .unzip();
        Ok(Stream {
            mode: self.mode,
            num_classes: ds.num_classes,
            train,
            val,
        })
    }
}

/// Where a batch sits in the task/epoch structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchTag {
    pub task: usize,
    pub epoch: usize,
    pub end_of_epoch: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Task-boundary annotation; `None` once stripped.
    pub tag: Option<BatchTag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub mode: StreamMode,
    pub num_classes: usize,
    pub train: Vec<TaskDataset>,
    /// Held-out split of each task, used for evaluation.
    pub val: Vec<TaskDataset>,
}

impl Stream {
    pub fn num_tasks(&self) -> usize {
        self.train.len()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.train[0].sample_shape()
    }

    /// Tasks in order, `epochs` passes each, reshuffled every epoch. The last
    /// batch of an epoch may be short.
    pub fn batches(&self, epochs: usize, batch_size: usize, seed: u64) -> Vec<Batch> {
        let mut rng = Rng::new(seed);
        let mut out = Vec::new();
        for task in &self.train {
            for epoch in 1..=epochs {
                let order = rng.permutation(task.len());
                let chunks: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
                let last = chunks.len().saturating_sub(1);
                for (i, rows) in chunks.into_iter().enumerate() {
                    let (inputs, labels) = task.gather(rows);
                    out.push(Batch {
                        inputs,
                        labels,
                        tag: Some(BatchTag {
                            task: task.task_index,
                            epoch,
                            end_of_epoch: i == last,
                        }),
                    });
                }
            }
        }
        out
    }

    /// Classes seen across all tasks.
    pub fn classes(&self) -> BTreeSet<usize> {
        self.train
            .iter()
            .flat_map(|t| t.class_set.iter().copied())
            .collect()
    }
}

/// Remove task-boundary annotations from a batch sequence.
pub fn strip_boundaries(batches: &[Batch]) -> Vec<Batch> {
    batches
        .iter()
        .map(|b| Batch {
            tag: None,
            ..b.clone()
        })
        .collect()
}
