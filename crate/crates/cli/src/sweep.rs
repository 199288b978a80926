//! `sweep`: a grid of method cells over a seed list, run on a bounded pool.
//! A failing cell becomes a flagged row; the grid always completes.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{deserialize_toml, MethodChoice, ObjectiveChoice, RunConfig};
use crate::pipeline::execute;
use crate::{create_dir, io_err, write_json, CliError, Result};

pub const RAW_FILE: &str = "raw.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SWEEP_FILE: &str = "sweep.json";
pub const RUNS_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub seeds: Vec<u64>,
    /// Settings shared by every cell.
    #[serde(default)]
    pub base: RunConfig,
    pub cells: Vec<CellSpec>,
}

fn default_name() -> String {
    "sweep".into()
}

/// One grid cell: a method plus the overrides that distinguish it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    pub method: MethodChoice,
    #[serde(default)]
    pub buffer_capacity: Option<usize>,
    /// Post-hoc finetuning mask; no post-hoc pass when absent.
    #[serde(default)]
    pub fpf_mask: Option<String>,
    #[serde(default)]
    pub fpf_steps: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub tau: Option<usize>,
    #[serde(default)]
    pub kfpf_steps: Option<usize>,
    #[serde(default)]
    pub objective: Option<ObjectiveChoice>,
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Fixed k-FPF mask instead of identification.
    #[serde(default)]
    pub kfpf_mask: Option<String>,
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::ConfigInvalid {
        field: field.to_string(),
        message: message.into(),
    }
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SweepSpec = deserialize_toml(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.cells.is_empty() {
            return Err(invalid("cells", "at least one cell is required"));
        }
        let mut names = BTreeSet::new();
        for (i, c) in self.cells.iter().enumerate() {
            let ok = !c.name.is_empty()
                && c.name
                    .chars()
                    .all(|ch| ch.is_ascii_alphanumeric() || "-_+.".contains(ch));
            if !ok {
                return Err(invalid(
                    &format!("cells[{i}].name"),
                    "use letters, digits and - _ + .",
                ));
            }
            if !names.insert(&c.name) {
                return Err(invalid(
                    &format!("cells[{i}].name"),
                    format!("duplicate cell {}", c.name),
                ));
            }
        }
        Ok(())
    }
}

impl CellSpec {
    /// The run config for this cell at `seed`.
    pub fn config(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.run_id = Some(format!("{}-seed{seed}", self.name));
        cfg.train.method = self.method;
        if let Some(c) = self.buffer_capacity {
            cfg.train.buffer_capacity = c;
        }
        cfg.fpf = self.fpf_mask.as_ref().map(|mask| {
            let mut f = base.fpf.clone().unwrap_or_default();
            f.mask = mask.clone();
            if let Some(s) = self.fpf_steps {
                f.steps = s;
            }
            f
        });
        cfg.kfpf = (self.method == MethodChoice::Kfpf).then(|| {
            let mut k = base.kfpf.clone().unwrap_or_default();
            if let Some(v) = self.k {
                k.k = v;
                k.tau = None;
                k.identify_step = None;
            }
            if let Some(v) = self.tau {
                k.tau = Some(v);
                k.identify_step = None;
            }
            if let Some(v) = self.kfpf_steps {
                k.steps = v;
            }
            if let Some(v) = self.objective {
                k.objective = v;
            }
            if let Some(v) = self.lambda {
                k.lambda = v;
            }
            if let Some(m) = &self.kfpf_mask {
                k.mask = Some(m.clone());
            }
            k
        });
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub cell: String,
    pub method: String,
    pub seed: u64,
    /// `ok` or `failed`.
    pub status: String,
    pub accuracy: Option<f64>,
    pub flops_cl: Option<u64>,
    pub flops_replay: Option<u64>,
    pub flops_ft: Option<u64>,
    pub flops_total: Option<u64>,
    /// `flops_total` over the largest total among successful rows.
    pub flops_norm: Option<f64>,
    pub error: String,
}

impl RawRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub cell: String,
    pub method: String,
    pub runs: usize,
    pub failed: usize,
    pub acc_mean: Option<f64>,
    /// Sample standard deviation; zero for a single run.
    pub acc_std: Option<f64>,
    pub flops_mean: Option<f64>,
    /// `flops_mean` over the largest cell mean in the sweep.
    pub flops_norm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub raw: Vec<RawRow>,
    pub aggregate: Vec<AggregateRow>,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

fn run_cell(cell: &CellSpec, base: &RunConfig, seed: u64, runs_dir: &Path) -> RawRow {
    let cfg = cell.config(base, seed);
    let mut row = RawRow {
        cell: cell.name.clone(),
        method: cfg.method_label(),
        seed,
        status: "failed".into(),
        accuracy: None,
        flops_cl: None,
        flops_replay: None,
        flops_ft: None,
        flops_total: None,
        flops_norm: None,
        error: String::new(),
    };
    match catch_unwind(AssertUnwindSafe(|| execute(&cfg, runs_dir))) {
        Ok(Ok(out)) => {
            let ledger = out.summary.fpf_ledger.unwrap_or(out.summary.ledger);
            row.status = "ok".into();
            row.method = out
                .summary
                .fpf
                .as_ref()
                .map_or(out.summary.method.clone(), |_| {
                    format!("fpf+{}", out.summary.method)
                });
            row.accuracy = Some(out.accuracy());
            row.flops_cl = Some(ledger.cl_training);
            row.flops_replay = Some(ledger.replay);
            row.flops_ft = Some(ledger.finetuning);
            row.flops_total = Some(ledger.total());
        }
        Ok(Err(e)) => row.error = e.to_string(),
        Err(p) => row.error = format!("panic: {}", panic_message(p)),
    }
    row
}

/// Fill `flops_norm` so that the largest successful total maps to 1.0.
pub fn normalize_raw(rows: &mut [RawRow]) {
    let max = rows.iter().filter_map(|r| r.flops_total).max().unwrap_or(0);
    for r in rows {
        r.flops_norm = r
            .flops_total
            .filter(|_| max > 0)
            .map(|f| f as f64 / max as f64);
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Per-cell mean and spread over successful rows, in first-appearance order.
pub fn aggregate(raw: &[RawRow]) -> Vec<AggregateRow> {
    let mut cells: Vec<&str> = Vec::new();
    for r in raw {
        if !cells.contains(&r.cell.as_str()) {
            cells.push(&r.cell);
        }
    }
    let mut rows: Vec<AggregateRow> = cells
        .iter()
        .map(|&cell| {
            let rs: Vec<&RawRow> = raw.iter().filter(|r| r.cell == cell).collect();
            let ok: Vec<&RawRow> = rs.iter().copied().filter(|r| r.is_ok()).collect();
            let acc: Vec<f64> = ok.iter().filter_map(|r| r.accuracy).collect();
            let flops: Vec<f64> = ok
                .iter()
                .filter_map(|r| r.flops_total)
                .map(|f| f as f64)
                .collect();
            AggregateRow {
                cell: cell.to_string(),
                method: ok.first().unwrap_or(&rs[0]).method.clone(),
                runs: rs.len(),
                failed: rs.len() - ok.len(),
                acc_mean: (!acc.is_empty()).then(|| mean(&acc)),
                acc_std: (!acc.is_empty()).then(|| sample_std(&acc)),
                flops_mean: (!flops.is_empty()).then(|| mean(&flops)),
                flops_norm: None,
            }
        })
        .collect();
    let max = rows.iter().filter_map(|r| r.flops_mean).fold(0.0, f64::max);
    for r in &mut rows {
        r.flops_norm = r.flops_mean.filter(|_| max > 0.0).map(|f| f / max);
    }
    rows
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(f));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_raw(path: &Path) -> Result<Vec<RawRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Run every (cell, seed) pair on at most `threads` workers and write
/// `raw.csv`, `aggregate.csv` and the echoed spec into `out_root/<name>`.
pub fn run_sweep(spec: &SweepSpec, out_root: &Path, threads: usize) -> Result<SweepOutcome> {
    spec.validate()?;
    let dir = out_root.join(&spec.name);
    let runs_dir = dir.join(RUNS_DIR);
    create_dir(&runs_dir)?;
    write_json(&dir.join(SWEEP_FILE), spec)?;
    let jobs: Vec<(&CellSpec, u64)> = spec
        .cells
        .iter()
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| invalid("threads", e.to_string()))?;
    let mut raw: Vec<RawRow> = pool.install(|| {
        jobs.par_iter()
            .map(|(cell, seed)| run_cell(cell, &spec.base, *seed, &runs_dir))
            .collect()
    });
    normalize_raw(&mut raw);
    let agg = aggregate(&raw);
    write_csv(&dir.join(RAW_FILE), &raw)?;
    write_csv(&dir.join(AGGREGATE_FILE), &agg)?;
    Ok(SweepOutcome {
        dir,
        raw,
        aggregate: agg,
    })
}
