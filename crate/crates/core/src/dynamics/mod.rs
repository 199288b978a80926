//! Parameter-change metrics, group sensitivity scores, and boundary detection.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{GroupId, ModelSnapshot, SelectionMask};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("vector lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty parameter vector")]
    EmptyVector,
    #[error("missing snapshot for task {task}, epoch {epoch}")]
    MissingSnapshot { task: usize, epoch: usize },
    #[error("snapshots disagree on parameter layout at {0}")]
    LayoutMismatch(String),
    #[error("every group has zero dynamics")]
    AllZeroDynamics,
    #[error("invalid dynamics value {value} for {group}")]
    InvalidValue { group: GroupId, value: f64 },
    #[error("need at least 2 transitions, got {0}")]
    InsufficientHistory(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

/// Default FPF selection threshold: groups scoring above average.
pub const FPF_THRESHOLD: f64 = 1.0;
pub const KFPF_THRESHOLD: f64 = 0.3;
pub const DEFAULT_SPIKE_FACTOR: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Change between adjacent epochs in stream order.
    ConsecutiveEpoch,
    /// Change between the same epoch of adjacent tasks.
    ConsecutiveTask,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::ConsecutiveEpoch => "consecutive_epoch",
            Metric::ConsecutiveTask => "consecutive_task",
        }
    }
}

/// One group's change over one snapshot pair. For the epoch metric `(task,
/// epoch)` is the later snapshot; for the task metric `task` is the earlier
/// task of the pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub group: GroupId,
    pub metric: Metric,
    pub task: usize,
    pub epoch: usize,
    /// Mean over member tensors of the per-tensor mean absolute change.
    pub value: f64,
    /// Population standard deviation of the per-tensor changes.
    pub spread: f64,
}

/// `(1/len)·Σ|a−b|`.
pub fn l1_mean_diff(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DynamicsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(DynamicsError::EmptyVector);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-group records for the change `from → to`, groups in sorted order.
/// Zero-length member tensors are skipped.
pub fn snapshot_diff(
    from: &ModelSnapshot,
    to: &ModelSnapshot,
    metric: Metric,
    task: usize,
    epoch: usize,
) -> Result<Vec<DynamicsRecord>> {
    if from.members().len() != to.members().len() {
        return Err(DynamicsError::LayoutMismatch(format!(
            "{} vs {} members",
            from.members().len(),
            to.members().len()
        )));
    }
    let mut per_group: BTreeMap<GroupId, Vec<f64>> = BTreeMap::new();
    for (a, b) in from.members().iter().zip(to.members()) {
        if a.name != b.name || a.group != b.group {
            return Err(DynamicsError::LayoutMismatch(a.name.clone()));
        }
        let changes = per_group.entry(a.group).or_default();
        if !a.values.is_empty() || !b.values.is_empty() {
            changes.push(l1_mean_diff(&a.values, &b.values)?);
        }
    }
    Ok(per_group
        .into_iter()
        .filter(|(_, c)| !c.is_empty())
        .map(|(group, c)| {
            let (value, spread) = mean_std(&c);
            DynamicsRecord {
                group,
                metric,
                task,
                epoch,
                value,
                spread,
            }
        })
        .collect())
}

fn index(snapshots: &[ModelSnapshot]) -> BTreeMap<(usize, usize), &ModelSnapshot> {
    snapshots
        .iter()
        .map(|s| ((s.task(), s.epoch()), s))
        .collect()
}

fn extent(snapshots: &[ModelSnapshot]) -> (usize, usize) {
    let t = snapshots.iter().map(ModelSnapshot::task).max().unwrap_or(0);
    let n = snapshots
        .iter()
        .map(ModelSnapshot::epoch)
        .max()
        .unwrap_or(0);
    (t, n)
}

fn lookup<'a>(
    idx: &BTreeMap<(usize, usize), &'a ModelSnapshot>,
    task: usize,
    epoch: usize,
) -> Result<&'a ModelSnapshot> {
    idx.get(&(task, epoch))
        .copied()
        .ok_or(DynamicsError::MissingSnapshot { task, epoch })
}

/// Change between every adjacent pair of epoch-end snapshots in stream order:
/// `(t,n−1)→(t,n)` within a task and `(t,N)→(t+1,1)` across a boundary.
/// Requires every `(t, n)` with `1 ≤ t ≤ T`, `1 ≤ n ≤ N`.
pub fn consecutive_epoch_metric(snapshots: &[ModelSnapshot]) -> Result<Vec<DynamicsRecord>> {
    let idx = index(snapshots);
    let (tasks, epochs) = extent(snapshots);
    let mut order = Vec::with_capacity(tasks * epochs);
    for t in 1..=tasks {
        for n in 1..=epochs {
            order.push(lookup(&idx, t, n)?);
        }
    }
    let mut out = Vec::new();
    for w in order.windows(2) {
        out.extend(snapshot_diff(
            w[0],
            w[1],
            Metric::ConsecutiveEpoch,
            w[1].task(),
            w[1].epoch(),
        )?);
    }
    Ok(out)
}

/// Change between epoch `n` of task `t` and epoch `n` of task `t+1`, for
/// every adjacent task pair.
pub fn consecutive_task_metric(
    snapshots: &[ModelSnapshot],
    n: usize,
) -> Result<Vec<DynamicsRecord>> {
    let idx = index(snapshots);
    let (tasks, _) = extent(snapshots);
    let mut out = Vec::new();
    for t in 1..tasks {
        let a = lookup(&idx, t, n)?;
        let b = lookup(&idx, t + 1, n)?;
        out.extend(snapshot_diff(a, b, Metric::ConsecutiveTask, t, n)?);
    }
    Ok(out)
}

/// Average record value per group.
pub fn group_means(records: &[DynamicsRecord]) -> BTreeMap<GroupId, f64> {
    let mut acc: BTreeMap<GroupId, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.group).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(g, (s, c))| (g, s / c as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// `S_g`; sums to `group_count`.
    pub scores: BTreeMap<GroupId, f64>,
    pub group_count: usize,
    /// Number of task transitions the dynamics were averaged over.
    pub window: usize,
}

/// Normalize per-group mean dynamics so the scores average to 1:
/// `S_g = C_g / Σ_g' C_g' · G`.
pub fn sensitivity_scores(
    group_dynamics: &BTreeMap<GroupId, f64>,
    window: usize,
) -> Result<SensitivityReport> {
    for (&group, &value) in group_dynamics {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(DynamicsError::InvalidValue { group, value });
        }
    }
    let total: f64 = group_dynamics.values().sum();
    if total <= 0.0 {
        return Err(DynamicsError::AllZeroDynamics);
    }
    let g = group_dynamics.len();
    let scores = group_dynamics
        .iter()
        .map(|(&k, &c)| (k, c / total * g as f64))
        .collect();
    Ok(SensitivityReport {
        scores,
        group_count: g,
        window,
    })
}

/// Groups with `S_g > threshold`; ties are excluded.
pub fn select_sensitive(report: &SensitivityReport, threshold: f64) -> SelectionMask {
    SelectionMask::new(
        report
            .scores
            .iter()
            .filter(|(_, &s)| s > threshold)
            .map(|(&g, _)| g),
    )
}

/// Finetuning mask from per-group dynamics. Running statistics are always
/// refreshed when present, so `BN_STATS` joins the mask unconditionally and
/// the remaining groups are scored among themselves.
pub fn finetune_selection(
    group_dynamics: &BTreeMap<GroupId, f64>,
    window: usize,
    threshold: f64,
) -> Result<(SensitivityReport, SelectionMask)> {
    let trainable: BTreeMap<GroupId, f64> = group_dynamics
        .iter()
        .filter(|(g, _)| g.is_trainable())
        .map(|(&g, &c)| (g, c))
        .collect();
    let report = sensitivity_scores(&trainable, window)?;
    let mut mask = select_sensitive(&report, threshold);
    if group_dynamics.contains_key(&GroupId::BnStats) {
        mask.insert(GroupId::BnStats);
    }
    Ok((report, mask))
}

/// Sensitivity from end-of-task states: the task metric at the last epoch,
/// averaged over the first `window` task transitions (all when `None`).
pub fn sensitivity_from_snapshots(
    snapshots: &[ModelSnapshot],
    window: Option<usize>,
) -> Result<SensitivityReport> {
    let (tasks, epochs) = extent(snapshots);
    let available = tasks.saturating_sub(1);
    let window = window.unwrap_or(available).min(available);
    let records: Vec<DynamicsRecord> = consecutive_task_metric(snapshots, epochs)?
        .into_iter()
        .filter(|r| r.task <= window)
        .collect();
    sensitivity_scores(&group_means(&records), window)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Positions `(task, epoch)` whose incoming transition spikes above
/// `spike_factor` times the median of the preceding `N−1` transitions (the
/// global median when fewer precede it). Each transition's value is the mean
/// over groups.
pub fn detect_boundaries(
    epoch_records: &[DynamicsRecord],
    spike_factor: f64,
) -> Result<Vec<(usize, usize)>> {
    let mut transitions: Vec<((usize, usize), Vec<f64>)> = Vec::new();
    for r in epoch_records {
        match transitions.last_mut() {
            Some((pos, vals)) if *pos == (r.task, r.epoch) => vals.push(r.value),
            _ => transitions.push(((r.task, r.epoch), vec![r.value])),
        }
    }
    if transitions.len() < 2 {
        return Err(DynamicsError::InsufficientHistory(transitions.len()));
    }
    let values: Vec<f64> = transitions
        .iter()
        .map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let epochs = transitions.iter().map(|((_, n), _)| *n).max().unwrap_or(1);
    let window = epochs.saturating_sub(1);
    let global = median(&values);
    Ok(transitions
        .iter()
        .enumerate()
        .filter(|&(i, _)| {
            let base = if window > 0 && i >= window {
                median(&values[i - window..i])
            } else {
                global
            };
            values[i] > spike_factor * base
        })
        .map(|(_, (pos, _))| *pos)
        .collect())
}

/// CSV with columns `run_id, metric, group, t, n, value, spread`.
pub fn write_dynamics_csv<W: Write>(w: W, run_id: &str, records: &[DynamicsRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["run_id", "metric", "group", "t", "n", "value", "spread"])?;
    for r in records {
        out.write_record([
            run_id.to_string(),
            r.metric.as_str().to_string(),
            r.group.to_string(),
            r.task.to_string(),
            r.epoch.to_string(),
            r.value.to_string(),
            r.spread.to_string(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Groups ordered by decreasing score.
pub fn ranking(values: &BTreeMap<GroupId, f64>) -> Vec<GroupId> {
    let mut v: Vec<(GroupId, f64)> = values.iter().map(|(&g, &c)| (g, c)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(g, _)| g).collect()
}

/// Groups present in a set of records.
pub fn record_groups(records: &[DynamicsRecord]) -> BTreeSet<GroupId> {
    records.iter().map(|r| r.group).collect()
}
