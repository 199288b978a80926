use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result, TaskDataset};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How classes are divided into tasks, in ascending class order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassSplit {
    /// `T` contiguous chunks; sizes differ by at most one, larger chunks first.
    Tasks(usize),
    /// Explicit chunk sizes, e.g. `[3, 3, 3, 1]`.
    Chunks(Vec<usize>),
}

impl ClassSplit {
    fn sizes(&self, num_classes: usize) -> Result<Vec<usize>> {
        match self {
            ClassSplit::Tasks(0) => Err(DataError::BadPartition("zero tasks".into())),
            ClassSplit::Tasks(t) if *t > num_classes => Err(DataError::BadPartition(format!(
                "{t} tasks for {num_classes} classes"
            ))),
            ClassSplit::Tasks(t) => {
                let (q, r) = (num_classes / t, num_classes % t);
                Ok((0..*t).map(|i| q + usize::from(i < r)).collect())
            }
            ClassSplit::Chunks(c) => {
                let sum: usize = c.iter().sum();
                if sum != num_classes || c.contains(&0) || c.is_empty() {
                    return Err(DataError::BadPartition(format!(
                        "chunks {c:?} do not partition {num_classes} classes"
                    )));
                }
                Ok(c.clone())
            }
        }
    }
}

/// Class-incremental split: disjoint contiguous class chunks, each task's
/// samples shuffled with `seed`.
pub fn split_class_il(ds: &Dataset, split: &ClassSplit, seed: u64) -> Result<Vec<TaskDataset>> {
    let sizes = split.sizes(ds.num_classes)?;
    let mut rng = Rng::new(seed);
    let mut next = 0;
    let mut tasks = Vec::with_capacity(sizes.len());
    for (t, size) in sizes.into_iter().enumerate() {
        let classes: BTreeSet<usize> = (next..next + size).collect();
        next += size;
        let mut rows: Vec<usize> = (0..ds.len())
            .filter(|&i| classes.contains(&ds.labels[i]))
            .collect();
        rng.shuffle(&mut rows);
        tasks.push(TaskDataset::from_dataset(t + 1, ds, &rows, classes));
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainTransform {
    /// A fixed random permutation of input elements per task; task 1 is the identity.
    PermutePixels,
    /// Rotate each image clockwise by `(t - 1) · step_deg`, nearest-neighbour sampling.
    Rotate { step_deg: f64 },
}

/// Domain-incremental stream: every task holds the base samples under a
/// task-specific input transform, with identical labels and class sets.
pub fn make_domain_stream(
    base: &TaskDataset,
    tasks: usize,
    transform: &DomainTransform,
    seed: u64,
) -> Result<Vec<TaskDataset>> {
    if tasks == 0 {
        return Err(DataError::InvalidSpec("zero tasks".into()));
    }
    let shape = base.sample_shape().to_vec();
    let d: usize = shape.iter().product();
    if let DomainTransform::Rotate { .. } = transform {
        let square = match shape.as_slice() {
            [h, w] | [_, h, w] => h == w,
            _ => false,
        };
        if !square {
            return Err(DataError::UnsupportedTransform(format!(
                "rotation needs square images, got sample shape {shape:?}"
            )));
        }
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(tasks);
    for t in 1..=tasks {
        let map: Vec<usize> = match transform {
            DomainTransform::PermutePixels => {
                let p = rng.permutation(d);
                if t == 1 {
                    (0..d).collect()
                } else {
                    p
                }
            }
            DomainTransform::Rotate { step_deg } => rotation_map(&shape, (t - 1) as f64 * step_deg),
        };
        let src = base.inputs.data();
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks(d.max(1)) {
            data.extend(
                map.iter()
                    .map(|&j| if j == usize::MAX { 0.0 } else { row[j] }),
            );
        }
        out.push(TaskDataset {
            task_index: t,
            inputs: Tensor::new(base.inputs.shape().to_vec(), data)?,
            labels: base.labels.clone(),
            class_set: base.class_set.clone(),
        });
    }
    Ok(out)
}

/// For each output element, the source element index (or `usize::MAX` when the
/// rotated position falls outside the image).
fn rotation_map(shape: &[usize], degrees: f64) -> Vec<usize> {
    let (c, n) = match *shape {
        [h, _] => (1, h),
        [c, h, _] => (c, h),
        _ => unreachable!("validated"),
    };
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let center = (n as f64 - 1.0) / 2.0;
    let mut map = Vec::with_capacity(c * n * n);
    for ch in 0..c {
        for i in 0..n {
            for j in 0..n {
                let (y, x) = (i as f64 - center, j as f64 - center);
                let ys = (y * cos - x * sin + center).round();
                let xs = (y * sin + x * cos + center).round();
                let inside = ys >= 0.0 && xs >= 0.0 && ys < n as f64 && xs < n as f64;
                map.push(if inside {
                    (ch * n + ys as usize) * n + xs as usize
                } else {
                    usize::MAX
                });
            }
        }
    }
    map
}
