//! `metrics.csv`: one row per evaluation point.
//!
//! Columns: `run_id, method, stage, step, task, epoch, split, avg_acc,
//! acc_t1 .. acc_tT, flops_cl, flops_replay, flops_ft`. `stage` is `epoch`
//! for epoch-end rows, `final` after the continual run, `fpf` after post-hoc
//! finetuning, and `before`/`after` in `fpf` run directories. Floats use the
//! shortest representation that round-trips.

use std::io::Write;
use std::path::Path;

use forgetlab_core::engine::{EvalResult, FlopsLedger};

use crate::{io_err, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: String,
    pub stage: String,
    pub step: u64,
    pub task: Option<usize>,
    pub epoch: Option<usize>,
    pub split: String,
    pub eval: EvalResult,
    pub ledger: FlopsLedger,
}

pub fn header(tasks: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "run_id", "method", "stage", "step", "task", "epoch", "split", "avg_acc",
    ]
    .map(String::from)
    .to_vec();
    h.extend((1..=tasks).map(|t| format!("acc_t{t}")));
    h.extend(["flops_cl", "flops_replay", "flops_ft"].map(String::from));
    h
}

fn opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics<W: Write>(w: W, tasks: usize, rows: &[MetricsRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header(tasks))?;
    for r in rows {
        let mut rec = vec![
            r.run_id.clone(),
            r.method.clone(),
            r.stage.clone(),
            r.step.to_string(),
            opt(r.task),
            opt(r.epoch),
            r.split.clone(),
            r.eval.average.to_string(),
        ];
        rec.extend((0..tasks).map(|t| {
            r.eval
                .per_task
                .get(t)
                .map(f64::to_string)
                .unwrap_or_default()
        }));
        rec.extend(
            [r.ledger.cl_training, r.ledger.replay, r.ledger.finetuning].map(|v| v.to_string()),
        );
        out.write_record(rec)?;
    }
    out.flush()
        .map_err(|e| io_err(Path::new(METRICS_FILE), e))?;
    Ok(())
}

pub fn save_metrics(path: &Path, tasks: usize, rows: &[MetricsRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_metrics(std::io::BufWriter::new(f), tasks, rows)
}
