//! `dynamics` and `fpf`: analyses that read an existing run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use forgetlab_core::dynamics::{
    consecutive_epoch_metric, consecutive_task_metric, detect_boundaries, finetune_selection,
    group_means, select_sensitive, sensitivity_scores, write_dynamics_csv, DynamicsRecord,
    DEFAULT_SPIKE_FACTOR, FPF_THRESHOLD, KFPF_THRESHOLD,
};
use forgetlab_core::engine::{evaluate, fpf, EvalResult, FinetuneConfig, FlopsLedger, Objective};
use forgetlab_core::nn::{GroupId, Model, SelectionMask};
use forgetlab_core::replay::ReplayBuffer;
use forgetlab_core::rng::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_mask, FpfSection};
use crate::manifest::{now, Command, RunManifest, MANIFEST_FILE};
use crate::metrics::{save_metrics, MetricsRow, METRICS_FILE};
use crate::pipeline::{
    build_stream, checkpoint_name, RunSummary, BUFFER_FILE, CHECKPOINT_DIR, FINAL_CHECKPOINT,
    POST_HOC_FPF_STREAM, SUMMARY_FILE,
};
use crate::{create_dir, io_err, read_json, write_json, CliError, Result};

pub const DYNAMICS_FILE: &str = "dynamics.csv";
pub const SENSITIVITY_FILE: &str = "sensitivity.json";
pub const DELTA_FILE: &str = "delta.json";

fn load_train_manifest(run_dir: &Path) -> Result<RunManifest> {
    let m = RunManifest::load(&run_dir.join(MANIFEST_FILE))?;
    if m.command != Command::Train {
        return Err(CliError::BadManifest {
            path: run_dir.join(MANIFEST_FILE),
            message: "expected a train run".into(),
        });
    }
    Ok(m)
}

#[derive(Debug, Clone, Default)]
pub struct DynamicsOptions {
    /// Extra threshold reported next to the two standard ones.
    pub threshold: Option<f64>,
    /// Task transitions averaged for sensitivity; all when absent.
    pub window: Option<usize>,
}

/// Contents of `sensitivity.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityFile {
    pub run_id: String,
    /// Epoch at which the task metric is taken (the last one).
    pub epoch: usize,
    pub window: usize,
    pub group_count: usize,
    /// Mean task-metric change per group over the window.
    pub dynamics: BTreeMap<GroupId, f64>,
    /// Normalized sensitivity over all groups; sums to the group count.
    pub scores: BTreeMap<GroupId, f64>,
    /// Groups with score above each threshold.
    pub masks: BTreeMap<String, SelectionMask>,
    /// Scores among trainable groups only.
    pub finetune_scores: BTreeMap<GroupId, f64>,
    /// Finetuning masks per threshold: trainable groups above it plus `BN_STATS`.
    pub finetune_masks: BTreeMap<String, SelectionMask>,
    /// Spikes in the consecutive-epoch metric, when there is enough history.
    pub boundaries: Option<Vec<(usize, usize)>>,
}

impl SensitivityFile {
    pub fn finetune_mask(&self, threshold: f64) -> Result<SelectionMask> {
        Ok(finetune_selection(&self.dynamics, self.window, threshold)?.1)
    }
}

pub fn threshold_key(th: f64) -> String {
    format!("{th:?}")
}

#[derive(Debug, Clone)]
pub struct DynamicsOutcome {
    pub epoch_records: Vec<DynamicsRecord>,
    pub task_records: Vec<DynamicsRecord>,
    pub sensitivity: SensitivityFile,
}

/// Compute both dynamics metrics from a run's epoch checkpoints and write
/// `dynamics.csv` and `sensitivity.json` into the run directory.
pub fn cmd_dynamics(run_dir: &Path, opts: &DynamicsOptions) -> Result<DynamicsOutcome> {
    let manifest = load_train_manifest(run_dir)?;
    let (tasks, epochs) = (manifest.config.stream.tasks, manifest.config.stream.epochs);
    let mut missing = Vec::new();
    let mut snaps = Vec::new();
    for t in 1..=tasks {
        for n in 1..=epochs {
            let path = run_dir.join(checkpoint_name(t, n));
            if !path.exists() {
                missing.push(checkpoint_name(t, n));
                continue;
            }
            snaps.push(Model::load(&path)?.0.snapshot(t, n));
        }
    }
    if !missing.is_empty() {
        return Err(CliError::MissingSnapshots(missing.join(", ")));
    }
    let epoch_records = consecutive_epoch_metric(&snaps)?;
    let mut task_records = Vec::new();
    for n in 1..=epochs {
        task_records.extend(consecutive_task_metric(&snaps, n)?);
    }
    let path = run_dir.join(DYNAMICS_FILE);
    let f = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    let all: Vec<DynamicsRecord> = epoch_records.iter().chain(&task_records).cloned().collect();
    write_dynamics_csv(std::io::BufWriter::new(f), &manifest.run_id, &all)?;

    let available = tasks.saturating_sub(1);
    let window = opts.window.unwrap_or(available).min(available);
    let windowed: Vec<DynamicsRecord> = task_records
        .iter()
        .filter(|r| r.epoch == epochs && r.task <= window)
        .cloned()
        .collect();
    let dynamics = group_means(&windowed);
    let report = sensitivity_scores(&dynamics, window)?;
    let mut thresholds = vec![FPF_THRESHOLD, KFPF_THRESHOLD];
    thresholds.extend(opts.threshold);
    let mut masks = BTreeMap::new();
    let mut finetune_masks = BTreeMap::new();
    let mut finetune_scores = BTreeMap::new();
    for th in thresholds {
        masks.insert(threshold_key(th), select_sensitive(&report, th));
        let (ft_report, ft_mask) = finetune_selection(&dynamics, window, th)?;
        finetune_masks.insert(threshold_key(th), ft_mask);
        finetune_scores = ft_report.scores;
    }
    let sensitivity = SensitivityFile {
        run_id: manifest.run_id.clone(),
        epoch: epochs,
        window,
        group_count: report.group_count,
        dynamics,
        scores: report.scores,
        masks,
        finetune_scores,
        finetune_masks,
        boundaries: detect_boundaries(&epoch_records, DEFAULT_SPIKE_FACTOR).ok(),
    };
    write_json(&run_dir.join(SENSITIVITY_FILE), &sensitivity)?;
    Ok(DynamicsOutcome {
        epoch_records,
        task_records,
        sensitivity,
    })
}

#[derive(Debug, Clone, Default)]
pub struct FpfOptions {
    pub section: FpfSection,
    /// Take the mask from the run's `sensitivity.json` at this threshold
    /// instead of `section.mask`.
    pub threshold: Option<f64>,
}

impl FpfOptions {
    pub fn from_section(section: FpfSection) -> Self {
        Self {
            section,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpfDelta {
    pub mask: SelectionMask,
    pub steps: usize,
    pub before: EvalResult,
    pub after: EvalResult,
    pub delta_average: f64,
    pub delta_per_task: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FpfOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub delta: FpfDelta,
}

/// Finetune a finished run's final model on its buffer and write a new run
/// directory `<run_id>-fpf` under `out_root` with before/after metrics.
pub fn cmd_fpf(run_dir: &Path, opts: &FpfOptions, out_root: &Path) -> Result<FpfOutcome> {
    let started = now();
    let parent = load_train_manifest(run_dir)?;
    let ckpt = run_dir.join(FINAL_CHECKPOINT);
    if !ckpt.exists() {
        return Err(CliError::MissingCheckpoint(ckpt));
    }
    let buffer_path = run_dir.join(BUFFER_FILE);
    if !buffer_path.exists() {
        return Err(CliError::MissingBuffer(buffer_path));
    }
    let mut section = opts.section.clone();
    if let Some(th) = opts.threshold {
        let path = run_dir.join(SENSITIVITY_FILE);
        if !path.exists() {
            return Err(CliError::MissingSnapshots(format!(
                "{} (run `dynamics` before selecting by threshold)",
                path.display()
            )));
        }
        let sens: SensitivityFile = read_json(&path)?;
        section.mask = sens.finetune_mask(th)?.to_string();
    }
    let mask = parse_mask("fpf.mask", &section.mask)?;
    let ft = FinetuneConfig {
        mask: mask.clone(),
        steps: section.steps,
        batch_size: section.batch_size,
        lr: section.lr,
    };

    let cfg = &parent.config;
    let stream = build_stream(cfg)?;
    let (mut model, _) = Model::load(&ckpt)?;
    let buffer = ReplayBuffer::load(&buffer_path)?;
    let summary: Option<RunSummary> = run_dir
        .join(SUMMARY_FILE)
        .exists()
        .then(|| read_json(&run_dir.join(SUMMARY_FILE)))
        .transpose()?;
    let (method, steps, mut ledger) = match &summary {
        Some(s) => (s.method.clone(), s.steps, s.ledger),
        None => (cfg.method_label(), 0, FlopsLedger::default()),
    };
    let before = evaluate(&model, &stream.val)?;
    let before_ledger = ledger;
    let mut rng = Rng::new(cfg.seed).fork(POST_HOC_FPF_STREAM);
    fpf(
        &mut model,
        &buffer,
        &ft,
        Objective::Ce,
        &mut rng,
        &mut ledger,
    )?;
    let after = evaluate(&model, &stream.val)?;

    let run_id = format!("{}-fpf", parent.run_id);
    let dir = out_root.join(&run_id);
    create_dir(&dir.join(CHECKPOINT_DIR))?;
    let row = |stage: &str, method: String, eval: &EvalResult, ledger: FlopsLedger| MetricsRow {
        run_id: run_id.clone(),
        method,
        stage: stage.into(),
        step: steps,
        task: None,
        epoch: None,
        split: "val".into(),
        eval: eval.clone(),
        ledger,
    };
    let rows = vec![
        row("before", method.clone(), &before, before_ledger),
        row("after", format!("fpf+{method}"), &after, ledger),
    ];
    save_metrics(&dir.join(METRICS_FILE), stream.num_tasks(), &rows)?;
    model.save(&dir.join(FINAL_CHECKPOINT), None)?;
    let delta = FpfDelta {
        mask,
        steps: ft.steps,
        delta_average: after.average - before.average,
        delta_per_task: after
            .per_task
            .iter()
            .zip(&before.per_task)
            .map(|(a, b)| a - b)
            .collect(),
        before,
        after,
    };
    write_json(&dir.join(DELTA_FILE), &delta)?;

    let mut manifest = RunManifest::new(Command::Fpf, cfg.clone(), started);
    manifest.run_id = run_id;
    manifest.finetune = Some(section);
    manifest.parent = Some(std::fs::canonicalize(run_dir).map_err(|e| io_err(run_dir, e))?);
    manifest.finish(
        &dir,
        &[
            METRICS_FILE.into(),
            FINAL_CHECKPOINT.into(),
            DELTA_FILE.into(),
        ],
    )?;
    Ok(FpfOutcome {
        dir,
        manifest,
        delta,
    })
}
