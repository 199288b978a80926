use serde::{Deserialize, Serialize};

use super::Result;
use crate::data::TaskDataset;
use crate::nn::Model;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Accuracy on each task's split, in task order.
    pub per_task: Vec<f64>,
    /// Mean of the per-task accuracies.
    pub average: f64,
}

/// Class-incremental accuracy: argmax over all output classes, no task oracle.
pub fn evaluate(model: &Model, tasks: &[TaskDataset]) -> Result<EvalResult> {
    let mut per_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut correct = 0usize;
        for start in (0..task.len()).step_by(EVAL_CHUNK) {
            let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(task.len())).collect();
            let (x, labels) = task.gather(&rows);
            let logits = model.predict(&x)?;
            let c = logits.shape()[1];
            correct += logits
                .data()
                .chunks(c)
                .zip(&labels)
                .filter(|(row, &label)| argmax(row) == label)
                .count();
        }
        per_task.push(if task.is_empty() {
            0.0
        } else {
            correct as f64 / task.len() as f64
        });
    }
    let average = if per_task.is_empty() {
        0.0
    } else {
        per_task.iter().sum::<f64>() / per_task.len() as f64
    };
    Ok(EvalResult { per_task, average })
}

/// Index of the largest value; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
